use std::path::{Path, PathBuf};

use serde::Serialize;

use movgan::data::{
    center_crop_clip, make_toy_dataset, parse_annotations, read_cache, refine, sample_clip, toy_categories, write_cache,
    ClipRecord, ImageDirSource, ToyConfig,
};
use movgan::evaluation::{
    adherence_chance_level, edit_layout, evaluate, generate_samples, layout_adherence, parse_edit_script, toy_palette,
    FeatureMode, SurrogateExtractor,
};
use movgan::generator::{Generator, LatentPair};
use movgan::layout::{format_layout_text, parse_layout_text, FrameLayout};
use movgan::rng::{stream, tag};
use movgan::training::{load_generator, train_loop, TrainConfig};
use movgan::{Error, Result};

use crate::manifest::RunManifest;
use crate::{EditArgs, EvalArgs, EvalMode, GenerateArgs, PrepArgs, ToyArgs, TrainArgs};

pub const CLIPS_FILE: &str = "clips.bin";
pub const CATEGORIES_FILE: &str = "categories.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn args_text(args: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string(args)?)
}

fn write_dataset(dir: &Path, clips: &[ClipRecord], categories: &[String]) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let cache = dir.join(CLIPS_FILE);
    write_cache(&cache, clips)?;
    let names = write_text(&dir.join(CATEGORIES_FILE), &serde_json::to_string_pretty(categories)?)?;
    Ok(vec![cache, names])
}

fn read_dataset(dir: &Path) -> Result<Vec<ClipRecord>> {
    read_cache(&dir.join(CLIPS_FILE))
}

pub fn prep(a: &PrepArgs) -> Result<()> {
    let manifest = RunManifest::begin("prep", &args_text(a)?, a.seed);
    let set = parse_annotations(&a.annotations)?;
    let (records, stats) = refine(&set.records, a.max_instances, a.balance, a.seed);
    let source = ImageDirSource {
        root: a.frames_root.clone(),
    };
    let mut clips = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let mut rng = stream(a.seed, &[tag("prep"), i as u64]);
        match sample_clip(record, &source, a.clip_length, a.resolution, false, &mut rng)? {
            Some(c) => clips.push(c),
            None => log::warn!(
                "video `{}` has no run of {} consecutive annotated frames",
                record.video_id,
                a.clip_length
            ),
        }
    }
    if clips.is_empty() {
        return Err(Error::Input("no video yields a clip after refinement".into()));
    }
    let mut outputs = write_dataset(&a.out, &clips, &set.categories)?;
    let stats_text = serde_json::to_string_pretty(&stats)?;
    outputs.push(write_text(&a.out.join("stats.json"), &stats_text)?);
    if let Some(p) = &a.stats_out {
        write_text(p, &stats_text)?;
    }
    println!("{}", serde_json::to_string(&stats)?);
    manifest.finish(&a.out, &outputs)
}

pub fn toy(a: &ToyArgs) -> Result<()> {
    let manifest = RunManifest::begin("toy", &args_text(a)?, a.seed);
    let config = ToyConfig {
        clips: a.clips,
        frames: a.frames,
        height: a.size,
        width: a.size,
        max_objects: a.max_objects,
        seed: a.seed,
        ..ToyConfig::default()
    };
    let clips = make_toy_dataset(&config)?;
    let outputs = write_dataset(&a.out, &clips, &toy_categories())?;
    log::info!("wrote {} toy clips to {}", clips.len(), a.out.display());
    manifest.finish(&a.out, &outputs)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(steps) = a.max_steps {
        config.max_steps = Some(steps);
    }
    config.validate()?;
    let config_text = config.to_toml()?;
    let manifest = RunManifest::begin("train", &config_text, config.seed);
    let dataset = read_dataset(&a.data)?;
    create_dir(&a.out)?;
    let config_copy = write_text(&a.out.join("config.toml"), &config_text)?;
    let run = train_loop(&dataset, &config, &a.out, a.resume.as_deref())?;
    if let Some(last) = run.history.last() {
        println!("{}", serde_json::to_string(&last.without_time())?);
    }
    manifest.finish(&a.out, &[config_copy, run.telemetry_log, run.checkpoint])
}

struct Loaded {
    generator: Generator,
    config: TrainConfig,
}

fn load(checkpoint: &Path) -> Result<Loaded> {
    let (generator, config) = load_generator(checkpoint)?;
    Ok(Loaded { generator, config })
}

fn read_layout(path: &Path, generator: &Generator) -> Result<FrameLayout> {
    let layout = parse_layout_text(&read_text(path)?)?;
    layout.validate(&generator.config().limits())?;
    Ok(layout)
}

/// Generates one clip for `layout` with latents drawn from `seed`.
fn render(m: &Loaded, layout: &FrameLayout, frames: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let g = &m.generator;
    let latent = LatentPair::sample(g.config(), &mut stream(seed, &[tag("generate")]), g.dtype())?;
    let condition = m.config.conditioning_mode.apply(layout);
    let clip = g.generate_video(&latent, &condition, &g.grid(frames)?)?;
    create_dir(dir)?;
    clip.write_png_frames(dir)
}

#[derive(Serialize)]
struct GenerationRecord<'a> {
    resolution: usize,
    frames: usize,
    seed: u64,
    checkpoint: &'a Path,
    conditioning_mode: &'a str,
    layout: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    edited_layout: Option<String>,
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let manifest = RunManifest::begin("generate", &args_text(a)?, a.seed);
    let m = load(&a.checkpoint)?;
    let layout = read_layout(&a.layout, &m.generator)?;
    let frames = a.frames.unwrap_or(m.config.clip_length);
    let mut outputs = render(&m, &layout, frames, a.seed, &a.out)?;
    let record = GenerationRecord {
        resolution: m.generator.config().resolution,
        frames,
        seed: a.seed,
        checkpoint: &a.checkpoint,
        conditioning_mode: m.config.conditioning_mode.name(),
        layout: format_layout_text(&layout),
        edited_layout: None,
    };
    outputs.push(write_text(&a.out.join("metadata.json"), &serde_json::to_string_pretty(&record)?)?);
    manifest.finish(&a.out, &outputs)
}

pub fn edit(a: &EditArgs) -> Result<()> {
    let manifest = RunManifest::begin("edit", &args_text(a)?, a.seed);
    let m = load(&a.checkpoint)?;
    let original = read_layout(&a.layout, &m.generator)?;
    let limits = m.generator.config().limits();
    let mut edited = original.clone();
    for e in parse_edit_script(&read_text(&a.script)?)? {
        edited = edit_layout(&edited, &e, &limits)?;
    }
    let frames = a.frames.unwrap_or(m.config.clip_length);
    let mut outputs = render(&m, &original, frames, a.seed, &a.out.join("original"))?;
    outputs.extend(render(&m, &edited, frames, a.seed, &a.out.join("edited"))?);
    outputs.push(write_text(&a.out.join("edited_layout.txt"), &format_layout_text(&edited))?);
    let record = GenerationRecord {
        resolution: m.generator.config().resolution,
        frames,
        seed: a.seed,
        checkpoint: &a.checkpoint,
        conditioning_mode: m.config.conditioning_mode.name(),
        layout: format_layout_text(&original),
        edited_layout: Some(format_layout_text(&edited)),
    };
    outputs.push(write_text(&a.out.join("metadata.json"), &serde_json::to_string_pretty(&record)?)?);
    manifest.finish(&a.out, &outputs)
}

#[derive(Serialize)]
struct EvalRecord {
    mode: EvalMode,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    chance_level: Option<f64>,
    real_samples: usize,
    generated_samples: usize,
    extractor: Option<String>,
    seed: u64,
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let manifest = RunManifest::begin("eval", &args_text(a)?, a.seed);
    let m = load(&a.checkpoint)?;
    let mut dataset = read_dataset(&a.data)?;
    let resolution = m.generator.config().resolution;
    if dataset.iter().any(|c| c.clip.height() != resolution || c.clip.width() != resolution) {
        return Err(Error::Input(format!("dataset clips must be {resolution}x{resolution} to match the checkpoint")));
    }
    let mode = m.config.conditioning_mode;
    if mode.center_crop() {
        dataset = dataset
            .iter()
            .map(|c| center_crop_clip(c, m.config.center_crop_fraction))
            .collect::<Result<_>>()?;
    }
    let record = match a.mode {
        EvalMode::Fid | EvalMode::Fvd => {
            let kind = if matches!(a.mode, EvalMode::Fid) { FeatureMode::Image } else { FeatureMode::Video };
            let extractor = SurrogateExtractor::new(kind, a.extractor_seed)?;
            let r = evaluate(&m.generator, &dataset, &extractor, a.samples, a.seed, mode)?;
            EvalRecord {
                mode: a.mode,
                score: r.score,
                chance_level: None,
                real_samples: r.real_samples,
                generated_samples: r.generated_samples,
                extractor: Some(r.extractor),
                seed: a.seed,
            }
        }
        EvalMode::Adherence => {
            let frames = dataset.first().map(ClipRecord::num_frames).unwrap_or(1);
            let samples = generate_samples(&m.generator, &dataset, a.samples, frames, a.seed, mode)?;
            let clips: Vec<_> = samples.iter().map(|s| s.clip.clone()).collect();
            let conditions: Vec<_> = samples.iter().map(|s| s.condition.clone()).collect();
            EvalRecord {
                mode: a.mode,
                score: layout_adherence(&clips, &conditions, &toy_palette())?,
                chance_level: Some(adherence_chance_level(&conditions, resolution, resolution)),
                real_samples: 0,
                generated_samples: samples.len(),
                extractor: None,
                seed: a.seed,
            }
        }
    };
    let line = serde_json::to_string(&record)?;
    println!("{line}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = write_text(&dir.join("eval.json"), &line)?;
        manifest.finish(dir, &[path])?;
    }
    Ok(())
}
