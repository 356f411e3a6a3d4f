//! Finite-key QKD toolkit: certified dual SDP bounds, concentration
//! inequalities and key-rate evaluation for BB84, MDI and decoy-state
//! protocols.

pub mod linops;
pub mod concbounds;
pub mod protocolkit;
pub mod sdpcore;
pub mod channelsim;
pub mod corrbound;
pub mod finitekey;
pub mod optimsweep;
pub mod validation;
