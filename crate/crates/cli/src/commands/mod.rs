pub mod calibrate;
pub mod evaluate;
pub mod sample;
pub mod select_window;
pub mod stats;
