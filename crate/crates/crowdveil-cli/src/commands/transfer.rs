//! `transfer-matrix`: attack a split with several generators and measure
//! every generator against every target model, printing the degradation /
//! transfer-ratio matrix and writing it as a report.

use std::path::PathBuf;

use clap::Args;
use crowdveil_core::data::{dataset_fingerprint, Split};
use crowdveil_core::generator::PerturbationGenerator;
use crowdveil_core::metrics::transfer_matrix;
use crowdveil_core::surrogate::{Paradigm, SurrogateModel};
use crowdveil_core::training::{load_generator, load_surrogate, BEST_CHECKPOINT};
use crowdveil_core::{Error, Result};

use crate::config::{generator_tag, RunConfig, Workspace};
use crate::manifest::Manifest;

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got '{s}'")),
    }
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Generator row as NAME=CHECKPOINT; repeatable. Defaults to the two
    /// standard generators (one per paradigm).
    #[arg(long = "gen", value_parser = parse_named)]
    pub gens: Vec<(String, PathBuf)>,
    /// Target column as NAME=CHECKPOINT; repeatable, aligned with --gen.
    /// Defaults to the two standard surrogates.
    #[arg(long = "target", value_parser = parse_named)]
    pub targets: Vec<(String, PathBuf)>,
    /// Which split to evaluate on.
    #[arg(long, value_parser = super::parse_split, default_value = "test")]
    pub split: Split,
    /// Detection threshold for point-model counting.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl TransferArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.tau {
            cfg.eval.tau = v;
        }
        if let Some(v) = &self.data {
            cfg.data.dir = Some(v.clone());
        }
    }
}

pub fn run(cfg: &RunConfig, ws: &Workspace, args: &TransferArgs) -> Result<()> {
    let both = [Paradigm::DensityMap, Paradigm::PointRegression];
    let gen_specs: Vec<(String, PathBuf)> = if args.gens.is_empty() {
        both.iter()
            .map(|&p| {
                let tag = generator_tag(p);
                let path = ws.generator_dir(&tag).join(BEST_CHECKPOINT);
                (tag, path)
            })
            .collect()
    } else {
        args.gens.clone()
    };
    let target_specs: Vec<(String, PathBuf)> = if args.targets.is_empty() {
        both.iter()
            .map(|&p| (p.as_str().to_string(), ws.surrogate_ckpt(p)))
            .collect()
    } else {
        args.targets.clone()
    };

    let generators: Vec<(String, PerturbationGenerator)> = gen_specs
        .iter()
        .map(|(name, path)| {
            super::require_file(path, "train-generator")?;
            Ok((name.clone(), load_generator(path)?))
        })
        .collect::<Result<_>>()?;
    let targets: Vec<(String, SurrogateModel)> = target_specs
        .iter()
        .map(|(name, path)| {
            super::require_file(path, "train-surrogate")?;
            Ok((name.clone(), load_surrogate(path)?))
        })
        .collect::<Result<_>>()?;

    let ds = super::load_split(&ws.data_dir(cfg), args.split)?;

    let gen_refs: Vec<(String, &PerturbationGenerator)> =
        generators.iter().map(|(n, g)| (n.clone(), g)).collect();
    let target_refs: Vec<(String, &SurrogateModel)> =
        targets.iter().map(|(n, s)| (n.clone(), s)).collect();
    let matrix = transfer_matrix(&gen_refs, &target_refs, &ds, cfg.eval.tau)?;

    // Rows: generators; columns: targets; cells: degradation (transfer ratio).
    let name_w = matrix.generator_names.iter().map(|n| n.len()).max().unwrap_or(8).max(16);
    println!("MAE degradation (transfer ratio) on the {} split:", args.split);
    print!("{:<name_w$}", "");
    for t in &matrix.target_names {
        print!("  {t:>20}");
    }
    println!();
    for (i, g) in matrix.generator_names.iter().enumerate() {
        print!("{g:<name_w$}");
        for j in 0..matrix.target_names.len() {
            let ratio = match matrix.transfer_ratio[i][j] {
                Some(r) => format!("{r:.2}"),
                None => "n/a".to_string(),
            };
            let cell = format!("{:.3} ({ratio})", matrix.mae_degradation[i][j]);
            print!("  {cell:>20}");
        }
        println!();
    }
    print!("{:<name_w$}", "clean MAE vs gt");
    for v in &matrix.clean_mae_vs_gt {
        print!("  {:>20.3}", v);
    }
    println!();

    let report_path = ws.reports_dir().join(format!("transfer_matrix-{}.json", args.split));
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(&matrix)
        .map_err(|e| Error::Data(format!("encoding matrix: {e}")))?;
    text.push('\n');
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    println!("matrix written to {}", report_path.display());

    let mut m = Manifest::new(&format!("transfer-matrix-{}", args.split), cfg)?;
    m.input("dataset", dataset_fingerprint(&ds));
    for (name, g) in &generators {
        m.input(&format!("generator/{name}"), g.checksum());
    }
    for (name, s) in &targets {
        m.input(&format!("target/{name}"), s.checksum());
    }
    m.output_file(&format!("reports/transfer_matrix-{}.json", args.split), &report_path)?;
    m.write(&ws.manifest_path(&format!("transfer-matrix-{}", args.split)))
}
