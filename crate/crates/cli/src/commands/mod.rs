pub mod calibrate;
pub mod evaluate;
pub mod frc;
pub mod localize;
pub mod render;
pub mod simulate;
