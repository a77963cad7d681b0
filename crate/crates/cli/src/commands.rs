use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use serde::Serialize;

use dauc_core::categorizer::CategorizeConfig;
use dauc_core::data::{format_float, meta_path, DatasetMeta};
use dauc_core::eval::{self, GoldMasks, PrCurve, BND_OR_BI, IDM_OR_BI};
use dauc_core::inverse::{inverse_retrain, FilterConfig, InverseReport};
use dauc_core::synth::is_cluster_id;
use dauc_core::{
    load_feature_csv, load_latent_csv, make_two_smiles, run_categorization, save_feature_csv,
    save_latent_csv, Category, CategoryReport, Checkpoint, Error, Kernel, LatentDataset,
    TrainConfig, TwoSmilesConfig, OOD_LABEL,
};

use crate::{
    CategorizeArgs, Command, Dataset, EvaluateArgs, Internal, InverseArgs, OptimizerArgs,
    PrCurveArgs, TrainArgs, TwoSmilesArgs,
};

const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            dataset: Dataset::TwoSmiles(a),
        } => generate(a),
        Command::Train(a) => train(a),
        Command::Categorize(a) => categorize(a),
        Command::Inverse(a) => inverse(a),
        Command::Evaluate(a) => evaluate(a),
        Command::PrCurve(a) => pr_curve(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn seed_of(csv: &Path) -> Result<Option<u64>> {
    let p = meta_path(csv);
    Ok(if p.exists() {
        DatasetMeta::load(&p)?.seed
    } else {
        None
    })
}

fn load_splits(dir: &Path) -> Result<[LatentDataset; 3]> {
    let load = |s: &str| {
        load_latent_csv(&dir.join(format!("{s}.csv")))
            .with_context(|| format!("loading {s} latents"))
    };
    Ok([load("train")?, load("val")?, load("test")?])
}

fn train_config(o: &OptimizerArgs) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        epochs: o.epochs,
        batch_size: o.batch_size,
        seed: o.seed,
        l2: o.l2,
    }
}

fn check_alignment(report: &CategoryReport, test: &LatentDataset) -> Result<()> {
    ensure!(
        report.examples.len() == test.len(),
        Error::LengthMismatch {
            left: report.examples.len(),
            right: test.len()
        }
    );
    for (row, (e, id)) in report.examples.iter().zip(test.ids()).enumerate() {
        ensure!(
            &e.id == id,
            Error::IdMismatch {
                row,
                left: e.id.clone(),
                right: id.clone()
            }
        );
    }
    Ok(())
}

fn generate(a: TwoSmilesArgs) -> Result<()> {
    let base = TwoSmilesConfig::default();
    let cfg = TwoSmilesConfig {
        n_moons: a.n_moons,
        moon_noise: a.moon_noise,
        cluster_n: a.cluster_n,
        cluster_std: a.cluster_std,
        ood_n: a.ood_n,
        ood_std: a.ood_std,
        split_fractions: [
            a.split_fractions[0],
            a.split_fractions[1],
            a.split_fractions[2],
        ],
        seed: a.seed,
        clusters: base.clusters,
        ood_centers: base.ood_centers,
    };
    let splits = make_two_smiles(&cfg)?;
    create_dir(&a.out)?;
    for (name, ds) in SPLITS
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        save_feature_csv(ds, &a.out.join(format!("{name}.csv")), Some(cfg.seed))?;
    }

    // Cluster points are the designed in-distribution misclassifications.
    let ids = &splits.test.ids;
    let mut gold = GoldMasks::new();
    gold.insert(
        IDM_OR_BI.to_string(),
        ids.iter().map(|id| is_cluster_id(id)).collect(),
    );
    write_text(
        &a.out.join("test.gold.csv"),
        &eval::write_gold_masks(ids, &gold),
    )?;

    #[derive(Serialize)]
    struct Config<'a> {
        dataset: &'static str,
        config: &'a TwoSmilesConfig,
    }
    write_json(
        &a.out.join("config.json"),
        &Config {
            dataset: "two-smiles",
            config: &cfg,
        },
    )?;
    println!(
        "wrote {} train / {} val / {} test rows to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let load = |s: &str| {
        load_feature_csv(&a.data.join(format!("{s}.csv")))
            .with_context(|| format!("loading {s} features"))
    };
    let (train, val, test) = (load("train")?, load("val")?, load("test")?);
    for ds in [&val, &test] {
        ensure!(
            ds.dim() == train.dim() && ds.num_classes == train.num_classes,
            Error::InvalidDataset("feature files disagree on dimension or class count".into())
        );
    }
    let tcfg = train_config(&a.opt);
    let ckpt = Checkpoint::train(&train, a.model.into(), a.latent_dim, &tcfg)?;
    create_dir(&a.out)?;
    ckpt.save(&a.out.join("checkpoint.json"))?;
    for (name, ds) in SPLITS.iter().zip([&train, &val, &test]) {
        let latents = ckpt.embed(ds)?;
        save_latent_csv(
            &latents,
            &a.out.join(format!("{name}.csv")),
            Some(tcfg.seed),
        )?;
        if let Some(acc) = latents.accuracy() {
            println!("{name}: accuracy {acc:.4}");
        }
    }
    Ok(())
}

fn categorize(a: CategorizeArgs) -> Result<()> {
    let [train, val, test] = load_splits(&a.inputs.latents)?;
    let ckpt = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = CategorizeConfig {
        kernel: Kernel::new(a.kernel.into(), a.bandwidth)?,
        q_bnd: a.q_bnd.or(a.q),
        q_idm: a.q_idm.or(a.q),
        basis: a.threshold_basis.into(),
        leave_one_out: a.leave_one_out,
        u_threshold: a.u_threshold,
    };
    let mut run = run_categorization(&train, &val, &test, &cfg, ckpt.as_ref().map(|c| &c.model))?;
    run.report.summary.seed = seed_of(&a.inputs.latents.join("test.csv"))?;

    let counts = run.report.summary.counts;
    let total: usize = Category::ALL.iter().map(|&c| counts.get(c)).sum();
    if total != test.len() {
        return Err(Internal(format!(
            "category counts sum to {total}, test has {} rows",
            test.len()
        ))
        .into());
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    run.report.save(&a.out)?;
    for c in Category::ALL {
        println!("{:<8} {}", c.name(), counts.get(c));
    }
    Ok(())
}

#[derive(Serialize)]
struct InverseSummary {
    target: Category,
    kernel: String,
    bandwidth: f64,
    seed: u64,
    train_config: TrainConfig,
    runs: Vec<InverseReport>,
}

fn cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn inverse(a: InverseArgs) -> Result<()> {
    let [train, _, test] = load_splits(&a.inputs.latents)?;
    let report = CategoryReport::load(&a.report)?;
    check_alignment(&report, &test)?;
    ensure!(
        !a.grid.is_empty(),
        Error::InvalidConfig("empty q grid".into())
    );

    let target: Category = a.target.into();
    let mask = report.mask(target);
    let tcfg = train_config(&a.opt);
    let mut runs = Vec::with_capacity(a.grid.len());
    let mut full_pred = None;
    let mut filtered_preds = Vec::with_capacity(a.grid.len());
    for &q in &a.grid {
        let fcfg = FilterConfig {
            q,
            bandwidth: a.bandwidth,
            kernel: a.kernel.into(),
            target,
        };
        let out = inverse_retrain(&train, &test, &mask, &fcfg, &tcfg)?;
        if q == 0.0 {
            if let Some(m) = &out.filtered_model {
                if m != &out.full_model {
                    return Err(
                        Internal("q = 0 retrain differs from the reference model".into()).into(),
                    );
                }
            }
        }
        full_pred.get_or_insert(out.full_pred);
        filtered_preds.push(out.filtered_pred);
        runs.push(out.report);
    }

    create_dir(&a.out)?;
    let mut plot = String::from(
        "q,n_train_filtered,acc_full_on_target,acc_filtered_on_target,acc_full_overall,acc_filtered_overall\n",
    );
    for r in &runs {
        plot.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_float(r.q),
            r.n_train_filtered,
            cell(r.acc_full_on_target),
            cell(r.acc_filtered_on_target),
            cell(r.acc_full_overall),
            cell(r.acc_filtered_overall)
        ));
    }
    write_text(&a.out.join("inverse_accuracy.csv"), &plot)?;

    let full_pred = full_pred.expect("grid is nonempty");
    let mut preds = String::from("id,y_true,target,pred_full");
    for q in &a.grid {
        preds.push_str(&format!(",pred_q{}", format_float(*q)));
    }
    preds.push('\n');
    for i in 0..test.len() {
        preds.push_str(&format!(
            "{},{},{},{}",
            test.ids()[i],
            test.y_true()[i],
            u8::from(mask[i]),
            full_pred[i]
        ));
        for p in &filtered_preds {
            preds.push(',');
            if let Some(p) = p {
                preds.push_str(&p[i].to_string());
            }
        }
        preds.push('\n');
    }
    write_text(&a.out.join("predictions.csv"), &preds)?;

    for r in &runs {
        println!(
            "q={:<4} kept {:>5}  target acc {} -> {}",
            r.q,
            r.n_train_filtered,
            cell(r.acc_full_on_target),
            cell(r.acc_filtered_on_target)
        );
    }
    write_json(
        &a.out.join("inverse.json"),
        &InverseSummary {
            target,
            kernel: a.kernel_name(),
            bandwidth: a.bandwidth,
            seed: tcfg.seed,
            train_config: tcfg.clone(),
            runs,
        },
    )
}

impl InverseArgs {
    fn kernel_name(&self) -> String {
        dauc_core::KernelFamily::from(self.kernel).to_string()
    }
}

fn gold_masks(path: Option<&Path>, test: &LatentDataset) -> Result<GoldMasks> {
    Ok(match path {
        Some(p) => eval::load_gold_masks(p, test.ids())?,
        None => GoldMasks::new(),
    })
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = CategoryReport::load(&a.report)?;
    let test = load_latent_csv(&a.test)?;
    let gold = gold_masks(a.gold.as_deref(), &test)?;
    let summary = eval::category_report(&report, &test, &gold)?;

    #[derive(Serialize)]
    struct Out<'a> {
        seed: Option<u64>,
        counts_only: bool,
        rows: &'a [eval::EvalRow],
    }
    write_json(
        &a.out,
        &Out {
            seed: report.summary.seed,
            counts_only: summary.rows.iter().all(|r| r.metrics.is_none()),
            rows: &summary.rows,
        },
    )?;
    let table = summary.to_table();
    write_text(&a.out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn pr_curve(a: PrCurveArgs) -> Result<()> {
    let report = CategoryReport::load(&a.report)?;
    let test = load_latent_csv(&a.test)?;
    check_alignment(&report, &test)?;
    let mut gold = gold_masks(a.gold.as_deref(), &test)?;
    gold.insert(
        Category::Ood.name().to_string(),
        test.y_true().iter().map(|&y| y == OOD_LABEL).collect(),
    );

    let column = |f: fn(&dauc_core::categorizer::ExampleRecord) -> f64| -> Vec<f64> {
        report.examples.iter().map(f).collect()
    };
    let scores = [
        ("t_ood", column(|e| e.t_ood), vec![Category::Ood.name()]),
        (
            "t_bnd",
            column(|e| e.t_bnd),
            vec![Category::Bnd.name(), BND_OR_BI],
        ),
        (
            "t_idm",
            column(|e| e.t_idm),
            vec![Category::Idm.name(), IDM_OR_BI],
        ),
    ];

    #[derive(Serialize)]
    struct Curve {
        score: String,
        gold: String,
        #[serde(flatten)]
        curve: PrCurve,
    }
    let mut curves = Vec::new();
    for (score, values, golds) in &scores {
        for g in golds {
            if let Some(mask) = gold.get(*g) {
                curves.push(Curve {
                    score: format!("{score}:{g}"),
                    gold: g.to_string(),
                    curve: eval::pr_curve(values, mask, a.n_points)?,
                });
            }
        }
    }

    create_dir(&a.out)?;
    let named: Vec<(&str, &PrCurve)> = curves
        .iter()
        .map(|c| (c.score.as_str(), &c.curve))
        .collect();
    write_text(&a.out.join("pr_curve.csv"), &eval::pr_curves_csv(&named))?;

    #[derive(Serialize)]
    struct Out<'a> {
        seed: Option<u64>,
        n_points: usize,
        curves: &'a [Curve],
    }
    write_json(
        &a.out.join("pr_curve.json"),
        &Out {
            seed: report.summary.seed,
            n_points: a.n_points,
            curves: &curves,
        },
    )?;
    for c in &curves {
        let flag = if c.curve.degenerate {
            " (degenerate)"
        } else {
            ""
        };
        println!("{}: {} points{flag}", c.score, c.curve.points.len());
    }
    Ok(())
}
