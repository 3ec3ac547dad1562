//! Delta learning for logistic regression: a linear student trained on
//! preference pairs whose chosen and rejected labels come from two weak
//! teachers, with the closed-form certificates that predict when and by how
//! much the student improves, and a seeded Monte Carlo harness that checks
//! them.

pub mod cli;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod task;
pub mod theory;
pub mod trainer;

pub use error::{Result, SimError};
pub use geometry::{
    cosine, project_orthogonal, sample_at_cosine, sample_gaussian, sample_unit_sphere, DenseVector, RngStream,
};
pub use task::{
    accuracy_to_alpha, alpha_to_accuracy, make_pair, sample_teacher_pair, PreferenceExample, Task, TeacherPair,
};
pub use theory::{prescribe, Certificate};
pub use trainer::{train, Sampler, TrainConfig, TrainMode, TrainTrace};
