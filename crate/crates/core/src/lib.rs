pub mod csl;
pub mod metrics;
pub mod model;
pub mod seqdata;
pub mod trainer;
