use std::path::{Path, PathBuf};

use clap::Args;
use classlist_core::cost::{expert_cost_estimate, CostModel};
use classlist_core::eval::{precision_estimate, AgreementReport, PrecisionEstimate, PrecisionSample};
use classlist_core::sim::SimReport;
use classlist_core::{mean_agreement, ClassList, Money, Partition};
use serde::Serialize;

use crate::{read_text, to_json_pretty, write_out, Classify, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Class list produced by `simulate` or the service.
    #[arg(long)]
    pub classes: PathBuf,
    /// Reference grouping: a class list, or `{"classes":[[id,..],..]}`.
    #[arg(long)]
    pub expert: PathBuf,
    /// Manually checked images, one `{"image","class_id","correct"}` per line.
    #[arg(long)]
    pub precision: Option<PathBuf>,
    /// Write the evaluation as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Evaluation {
    version: String,
    classes: PathBuf,
    expert: PathBuf,
    class_list_agreement: AgreementReport,
    dataset_precision: Option<PrecisionEstimate>,
    classification_accuracy: Option<f64>,
}

/// Reads either partition format; a class list is reduced to its members.
fn load_partition(path: &Path) -> Result<Partition, Failure> {
    let text = read_text(path)?;
    if let Ok(list) = ClassList::from_json(&text) {
        return Partition::new(list.classes.into_iter().map(|c| c.members)).config(path.display());
    }
    Partition::from_json(&text).config(path.display())
}

fn load_samples(path: &Path) -> Result<Vec<PrecisionSample>, Failure> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).config(format!("{}:{}", path.display(), i + 1)))
        .collect()
}

pub fn run(a: EvaluateArgs) -> CmdResult {
    let alg = load_partition(&a.classes)?;
    let exp = load_partition(&a.expert)?;
    let agreement = mean_agreement(&alg, &exp).config("comparing partitions")?;
    let precision = match &a.precision {
        None => None,
        Some(p) => Some(precision_estimate(&load_samples(p)?).config(p.display())?),
    };

    println!("{:<40} Value", "Measure");
    println!(
        "{:<40} {} ({} types)",
        "Class list accuracy",
        agreement.percent_string(),
        agreement.n_evaluated
    );
    match &precision {
        Some(p) => println!(
            "{:<40} {:.2}% (95% CI {:.2}%-{:.2}%, n={})",
            "Dataset precision",
            p.fraction * 100.0,
            p.interval.0 * 100.0,
            p.interval.1 * 100.0,
            p.n
        ),
        None => println!("{:<40} not measured", "Dataset precision"),
    }
    println!("{:<40} out of scope", "Fine-grained classification accuracy");

    if let Some(out) = &a.out {
        let eval = Evaluation {
            version: env!("CARGO_PKG_VERSION").to_string(),
            classes: a.classes.clone(),
            expert: a.expert.clone(),
            class_list_agreement: agreement,
            dataset_precision: precision,
            classification_accuracy: None,
        };
        write_out(out, &to_json_pretty(&eval))?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long, default_value_t = 2_000_000)]
    pub annotations: u64,
    /// Price from an hourly wage instead of the quoted per-annotation rate.
    #[arg(long)]
    pub wage: Option<f64>,
    /// Annotations per hour, used with `--wage`.
    #[arg(long, default_value_t = 60)]
    pub per_hour: u32,
    /// Compare against the crowd spend in a simulation report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn cost(a: CostArgs) -> CmdResult {
    let model = match a.wage {
        None => CostModel::quoted(),
        Some(w) if w.is_finite() && w >= 0.0 && a.per_hour > 0 => {
            CostModel::from_wage(Money::from_dollars_f64(w), a.per_hour)
        }
        Some(_) => return Err(Failure::Config("--wage must be >= 0 and --per-hour > 0".into())),
    };
    let (annotations, crowd) = match &a.report {
        None => (a.annotations, None),
        Some(p) => {
            let r: SimReport = serde_json::from_str(&read_text(p)?).config(p.display())?;
            (r.cost.annotations, Some(r.cost.total_crowd_cost))
        }
    };
    let expert = expert_cost_estimate(annotations, &model);
    println!("annotations:     {annotations}");
    println!("rate:            {} ({})", model.expert_rate, model.derivation);
    println!("expert estimate: {expert}");
    if let Some(c) = crowd {
        println!("crowd spend:     {c}");
        if c.0 > 0 {
            println!("savings ratio:   {:.1}x", expert.0 as f64 / c.0 as f64);
        }
    }
    Ok(())
}
