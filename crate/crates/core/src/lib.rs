//! Weakly supervised localization with pyramid gradient-based class
//! activation maps (PG-CAM) over a densely connected feature pyramid
//! network, plus the data, training and evaluation pieces around it.

pub mod tensor;
pub mod models;
pub mod cam;
pub mod localizer;
pub mod phantom;
pub mod report;
pub mod trainer;

pub mod io;
