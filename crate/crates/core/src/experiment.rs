//! Scenario engine: binds generation, training, and evaluation into the
//! experiment protocols, and writes machine-readable reports.
//!
//! Placeholder while the scenario runner is under construction.

pub(crate) const _TODO: () = ();
