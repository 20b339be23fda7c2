use std::path::PathBuf;

use clap::Args;
use classlist_core::ingest::{synth_corpus, write_corpus};
use classlist_core::sim::{synth_world, WorldSpec};
use classlist_core::taxonomy::write_jsonl;

use crate::simulate::ConfigFile;
use crate::{to_json_pretty, write_out, Classify, CmdResult};

pub const TAXONOMY_FILE: &str = "taxonomy.jsonl";
pub const GOLDS_FILE: &str = "golds.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const IMAGE_TRUTH_FILE: &str = "image_truth.json";

#[derive(Args, Debug)]
pub struct WorldArgs {
    /// TOML file; only its `[world]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    /// Listing posts to synthesize; 0 skips the corpus.
    #[arg(long, default_value_t = 1000)]
    pub posts: usize,
    #[arg(long, default_value = "world")]
    pub out: PathBuf,
}

pub fn run(a: WorldArgs) -> CmdResult {
    let mut spec = ConfigFile::load(a.config.as_deref())?.world.unwrap_or_default();
    if let Some(s) = a.world_seed {
        spec.seed = s;
    }
    let world = synth_world(&spec).config("world settings")?;
    write_out(&a.out.join(TAXONOMY_FILE), &write_jsonl(&world.forest))?;
    write_out(&a.out.join(GOLDS_FILE), &world.golds.to_jsonl())?;
    write_out(&a.out.join("truth.json"), &(world.truth.partition().to_json() + "\n"))?;
    write_out(&a.out.join("world.json"), &to_json_pretty::<WorldSpec>(&spec))?;
    println!("trims:   {}", world.forest.len());
    println!("classes: {}", world.truth.class_count());
    if a.posts > 0 {
        let corpus = synth_corpus(&world.forest, a.posts, spec.seed);
        write_out(&a.out.join(CORPUS_FILE), &write_corpus(&corpus.posts))?;
        write_out(&a.out.join(IMAGE_TRUTH_FILE), &to_json_pretty(&corpus.truth))?;
        println!("posts:   {}", corpus.posts.len());
    }
    println!("output:  {}", a.out.display());
    Ok(())
}
