//! Experiment configuration.
