//! Fixtures shared by the benchmarks.

use panoscan::features::{FeatureBank, FeatureEncoder};
use panoscan::model::Model;
use panoscan::policy::PolicyConfig;
use panoscan::assessor::AssessorConfig;
use panoscan::sphere::{build_grid, ErpImage, ViewportGrid};
use panoscan::synth::{gen_panorama, Texture};

pub struct Fixture {
    pub erp: ErpImage,
    pub grid: ViewportGrid,
    pub bank: FeatureBank,
    pub model: Model,
}

/// A 512x256 panorama on the default grid, with a model at default widths
/// over `d`-dimensional features.
pub fn fixture(d: usize) -> Fixture {
    let erp = gen_panorama(11, &Texture::default(), 512).expect("panorama");
    let grid = build_grid(8, 4, 90.0).expect("grid");
    let enc = FeatureEncoder::new(d).expect("encoder");
    let bank = FeatureBank::compute(&enc, &erp, &grid, 64).expect("bank");
    let pcfg = PolicyConfig { feature_dim: d, ..PolicyConfig::default() };
    let acfg = AssessorConfig { feature_dim: d, ..AssessorConfig::default() };
    let model = Model::init(&pcfg, &acfg, 1).expect("model");
    Fixture { erp, grid, bank, model }
}
