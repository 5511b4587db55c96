//! Small on-disk datasets and configs for training tests.

use std::path::Path;

use mango::config::ExperimentConfig;
use mango::data::{Domain, DomainDataset};
use mango::nets::ParamStore;
use mango::synthgen::{generate_domain, DomainSpec, Style, ViewRange, Viewpoint};

/// A 32px network small enough for hundreds of steps per second of test time.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::from_str_with(
        r#"{
          "num_classes": 5, "image_size": 32, "gen_channels": 4, "gen_res_blocks": 1,
          "tap_layers": ["input", "down1", "res1"], "num_features_per_layer": 8,
          "segnce_features_per_layer": 8, "head_hidden": 8, "head_dim": 8, "disc_channels": 4,
          "patch_size": 16, "patches_per_image": 2, "total_steps": 10, "checkpoint_every": 5,
          "seed": 3
        }"#,
        &[],
    )
    .unwrap()
}

pub fn spec(n: usize, style: Style, view_range: ViewRange, seed: u64, size: usize) -> DomainSpec {
    DomainSpec { n_images: n, style, view_range, seed, image_size: size, num_classes: 5 }
}

pub fn fixed_view() -> ViewRange {
    ViewRange::point(Viewpoint::CANONICAL)
}

pub fn load(root: &Path, domain: Domain, cfg: &ExperimentConfig) -> DomainDataset {
    let mut ds = DomainDataset::load(root, domain, cfg).unwrap();
    ds.preload().unwrap();
    ds
}

/// Sim domain A and textured domain B under `root`, at the config's size.
pub fn tiny_domains(root: &Path, cfg: &ExperimentConfig) -> (DomainDataset, DomainDataset) {
    let size = cfg.image_size;
    generate_domain(&root.join("a"), &spec(6, Style::SimFlat, ViewRange::default(), 1, size)).unwrap();
    generate_domain(&root.join("b"), &spec(4, Style::RealTextured, fixed_view(), 2, size)).unwrap();
    (load(&root.join("a"), Domain::A, cfg), load(&root.join("b"), Domain::B, cfg))
}

pub fn same_params(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| na == nb && ta == tb)
}
