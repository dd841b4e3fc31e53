//! Hierarchical label tree built by recursive balanced k-means.

mod kmeans;
mod tree;

pub use kmeans::{balanced_kmeans, balanced_kmeans_subset, ClusterPoints};
pub use tree::{build_tree, build_tree_from_points, propagate_labels, HltConfig, LabelTree};
