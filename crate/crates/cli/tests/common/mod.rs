#![allow(dead_code)]

use std::path::{Path, PathBuf};

use msl_core::model::{ModelConfig, MslModel};

/// A small dataset plus an untrained 16x16 checkpoint whose conditional
/// projections are perturbed so outputs depend on lambda.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let code = msl_cli::run(args(&[
            "gen-data",
            "--out",
            path(&data),
            "--pairs",
            "2",
            "--heldout",
            "2",
            "--seed",
            "3",
            "--size",
            "16",
            "--views",
            "16",
            "--rate",
            "0.5",
        ]));
        assert_eq!(code, 0);
        let checkpoint = dir.path().join("tiny.mslc");
        lambda_sensitive(7).save(&checkpoint).unwrap();
        Self { dir, data, checkpoint }
    }

    pub fn case(&self, split: &str, i: usize) -> PathBuf {
        self.data.join(split).join(format!("pair_{i:03}"))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

pub fn lambda_sensitive(seed: u64) -> MslModel {
    let mut model = MslModel::new(ModelConfig::tiny(), seed).unwrap();
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.ends_with(".wg") || n.ends_with(".wb"))
        .collect();
    for name in names {
        let id = model.params.id(&name).unwrap();
        let t = model.params.get_mut(id);
        let fan = (t.shape()[1] as f32).sqrt();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let u = ((i as f32 + 1.0) * 12.9898 + seed as f32).sin() * 43758.547;
            *v = (2.0 * u.fract().abs() - 1.0) / fan;
        }
    }
    model
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn args<'a>(rest: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["msl"];
    v.extend_from_slice(rest);
    v
}

pub fn msl(rest: &[&str]) -> i32 {
    msl_cli::run(args(rest))
}
