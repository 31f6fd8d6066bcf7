//! Unit system: eV, Å, fs, amu, K.

/// Boltzmann constant in eV/K.
pub const KB: f64 = 8.617333262e-5;

/// Converts force/mass in eV/(Å·amu) to acceleration in Å/fs².
pub const ACCEL: f64 = 9.648533212331e-3;

/// Kinetic energy of 1 amu·Å²/fs² expressed in eV.
pub const MVV_TO_EV: f64 = 1.0 / ACCEL;

/// Force unit conversion for reports.
pub const MEV_PER_EV: f64 = 1000.0;
