#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod augment;
pub mod cfg;
pub mod diff;
pub mod fusion;
pub mod geom;
pub mod img;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod radar;
pub mod raster;
pub mod scene;
pub mod sensor;
pub mod train;
