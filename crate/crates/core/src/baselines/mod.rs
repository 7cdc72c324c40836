//! Comparison methods: linear interpolation of references and a conditional GAN.

pub mod cgan;
pub mod interp;
