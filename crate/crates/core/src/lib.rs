//! Quantum-level CAN bus simulator with in-frame source authentication by a
//! dedicated authenticator node.

pub mod attack;
pub mod bits;
pub mod bpmac;
pub mod bus;
pub mod cipher;
pub mod cmac;
pub mod frame;
pub mod node;
pub mod reference;
pub mod scenario;
pub mod secoc;
pub mod vectors;

pub use bits::BitString;
pub use frame::{decode_frame, encode_frame, CodecError, EncodedFrame, Frame};
