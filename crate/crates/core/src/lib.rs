pub mod dataio;
pub mod decorr;
pub mod diffnet;
pub mod geom;
pub mod rng;
pub mod synth;
pub mod trackeval;
pub mod trainloop;
