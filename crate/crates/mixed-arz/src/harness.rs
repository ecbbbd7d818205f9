//! Scenario runner, parameter sweeps, and report generation.
