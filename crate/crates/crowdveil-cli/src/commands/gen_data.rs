//! `gen-data`: synthesize the train/test scene splits and write them in the
//! on-disk dataset layout, printing count statistics per split.

use clap::Args;
use crowdveil_core::data::{dataset_fingerprint, generate_dataset, save_dataset, Dataset, Split};
use crowdveil_core::metrics::regime_label;
use crowdveil_core::Result;

use crate::config::{RunConfig, Workspace};
use crate::manifest::Manifest;

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of training scenes.
    #[arg(long)]
    pub train_scenes: Option<usize>,
    /// Number of test scenes.
    #[arg(long)]
    pub test_scenes: Option<usize>,
    /// Minimum people per scene.
    #[arg(long)]
    pub count_min: Option<usize>,
    /// Maximum people per scene.
    #[arg(long)]
    pub count_max: Option<usize>,
    /// Scene height in pixels.
    #[arg(long)]
    pub height: Option<usize>,
    /// Scene width in pixels.
    #[arg(long)]
    pub width: Option<usize>,
    /// Gaussian radius of a rendered head blob.
    #[arg(long)]
    pub blob_sigma: Option<f64>,
    /// Base seed for scene generation.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl GenDataArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        if let Some(v) = self.train_scenes {
            d.train_scenes = v;
        }
        if let Some(v) = self.test_scenes {
            d.test_scenes = v;
        }
        if let Some(v) = self.count_min {
            d.count_min = v;
        }
        if let Some(v) = self.count_max {
            d.count_max = v;
        }
        if let Some(v) = self.height {
            d.height = v;
        }
        if let Some(v) = self.width {
            d.width = v;
        }
        if let Some(v) = self.blob_sigma {
            d.blob_sigma = v;
        }
        if let Some(v) = self.seed {
            d.seed = v;
        }
    }
}

fn print_stats(ds: &Dataset) {
    if ds.scenes.is_empty() {
        println!("{}: 0 scenes", ds.split);
        return;
    }
    let counts: Vec<usize> = ds.scenes.iter().map(|s| s.annotation.count()).collect();
    let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let mut sparse = 0;
    let mut medium = 0;
    let mut dense = 0;
    for &c in &counts {
        match regime_label(c) {
            "sparse" => sparse += 1,
            "medium" => medium += 1,
            _ => dense += 1,
        }
    }
    println!(
        "{}: {} scenes, counts {min}..{max} (mean {mean:.1}); \
         sparse {sparse} / medium {medium} / dense {dense}",
        ds.split,
        ds.scenes.len()
    );
}

pub fn run(cfg: &RunConfig, ws: &Workspace) -> Result<()> {
    let d = &cfg.data;
    let data_dir = ws.data_dir(cfg);

    let train = generate_dataset(
        d.train_scenes,
        d.count_min,
        d.count_max,
        d.height,
        d.width,
        d.blob_sigma,
        Split::Train,
        d.seed,
    )?;
    let test = generate_dataset(
        d.test_scenes,
        d.count_min,
        d.count_max,
        d.height,
        d.width,
        d.blob_sigma,
        Split::Test,
        d.seed,
    )?;
    save_dataset(&train, &data_dir)?;
    save_dataset(&test, &data_dir)?;
    print_stats(&train);
    print_stats(&test);
    println!("dataset written under {}", data_dir.display());

    let mut m = Manifest::new("gen-data", cfg)?;
    m.outputs.insert("data/train".into(), dataset_fingerprint(&train));
    m.outputs.insert("data/test".into(), dataset_fingerprint(&test));
    m.write(&ws.manifest_path("gen-data"))
}
