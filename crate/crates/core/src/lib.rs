pub mod cdf;
pub mod federated;
pub mod harness;
pub mod pairing;
pub mod path;
pub mod profile;
pub mod projection;
pub mod survival;
pub mod twin;
