pub mod algebra;
pub mod checks;
pub mod coeff;
pub mod config;
pub mod constraints;
pub mod dynamics;
pub mod moments;
pub mod oracle;
pub mod pipeline;
pub mod poly;
