pub mod certkit;
pub mod engine;
pub mod keystore;
pub mod schedule;
pub mod timeauth;
pub mod verifier;
pub mod xmss;
