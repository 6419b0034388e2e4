pub mod constraints;
pub mod dense;
pub mod inference;
pub mod likelihood;
pub mod model;
pub mod simulate;
pub mod sparse;
pub mod structures;
