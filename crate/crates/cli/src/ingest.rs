use std::path::PathBuf;

use clap::Args;
use classlist_core::aggregate::AggregationPolicy;
use classlist_core::ingest::{
    build_manifest, build_queries, harvest, image_gold_bank, manifest_jsonl, read_corpus,
    verify_images, ImageTruth, VerifyOptions,
};
use classlist_core::sim::{fig4_world, SimBackend, WorldSpec};
use classlist_core::{ClassList, TaxonomyForest};
use serde::Serialize;

use crate::{read_text, to_json_pretty, write_out, Classify, CmdResult, Failure, Fixture};

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Taxonomy as CSV or JSON lines.
    #[arg(long, required_unless_present = "fixture")]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "taxonomy")]
    pub fixture: Option<Fixture>,
    /// Listing posts as JSON lines (`post_id`, `title`, `images`, ...).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Which images contain cars; enables simulated verification.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Class list used to label the retained images.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Flip rate of the simulated verifiers.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Votes per image (odd).
    #[arg(long, default_value_t = 3)]
    pub k: u32,
    #[arg(long, default_value = "ingest")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct HarvestSummary {
    posts: usize,
    queries: usize,
    candidates: usize,
    ambiguous_posts: usize,
    ambiguous_images: usize,
}

pub fn run(a: IngestArgs) -> CmdResult {
    let forest = match (&a.taxonomy, a.fixture) {
        (_, Some(Fixture::Fig4)) => fig4_world(false).forest,
        (Some(t), None) => TaxonomyForest::from_path(t).config(t.display())?,
        (None, None) => return Err(Failure::Config("--taxonomy is required".into())),
    };
    let posts = read_corpus(&a.corpus).config(a.corpus.display())?;
    let truth: Option<ImageTruth> = match &a.truth {
        None => None,
        Some(p) => Some(serde_json::from_str(&read_text(p)?).config(p.display())?),
    };
    let classes: Option<ClassList> = match &a.classes {
        None => None,
        Some(p) => Some(ClassList::from_json(&read_text(p)?).config(p.display())?),
    };
    let policy = AggregationPolicy::majority(a.k);
    policy.validate().map_err(Failure::Config)?;

    let queries = build_queries(&forest);
    let harvested = harvest(&posts, &queries);
    let summary = HarvestSummary {
        posts: posts.len(),
        queries: queries.len(),
        candidates: harvested.candidates.len(),
        ambiguous_posts: harvested.ambiguous.len(),
        ambiguous_images: harvested.ambiguous_images(),
    };
    write_out(&a.out.join("harvest.json"), &to_json_pretty(&harvested))?;
    println!("posts:           {}", summary.posts);
    println!("queries:         {}", summary.queries);
    println!("candidates:      {}", summary.candidates);
    println!("ambiguous posts: {}", summary.ambiguous_posts);

    let Some(truth) = truth else {
        write_out(&a.out.join("summary.json"), &to_json_pretty(&summary))?;
        println!("no --truth given: images left unverified");
        return Ok(());
    };
    let spec = WorldSpec {
        p_false_same: a.noise,
        p_false_diff: a.noise,
        spammer_fraction: 0.0,
        ..WorldSpec::default()
    };
    spec.validate().config("--noise")?;
    let mut backend = SimBackend::new(spec.workers(), &truth, a.seed);
    let options = VerifyOptions {
        seed: a.seed,
        ..VerifyOptions::default()
    };
    let verified = verify_images(&harvested, &mut backend, &policy, &image_gold_bank(10, 10), &options)
        .runtime("verifying images")?;
    write_out(&a.out.join("verify.json"), &to_json_pretty(&verified))?;
    println!("retained:        {}", verified.stats.retained);
    println!("excluded:        {}", verified.stats.excluded);
    println!("crowd cost:      {}", verified.stats.cost);

    if let Some(classes) = classes {
        let manifest = build_manifest(&verified.candidates, &classes).config("labelling images")?;
        write_out(&a.out.join("manifest.jsonl"), &manifest_jsonl(&manifest))?;
        println!("manifest:        {} image(s)", manifest.len());
    }
    write_out(&a.out.join("summary.json"), &to_json_pretty(&summary))?;
    Ok(())
}
