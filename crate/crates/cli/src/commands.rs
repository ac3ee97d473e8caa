//! The five pipeline commands. Every artifact lands in the output directory
//! under a name derived from its phase and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dadee_core::evaluation::{export_features, multi_seed_summary, ExperimentReport};
use dadee_core::experiment::{build_report, choose_alpha, prepare_data, run_adapt, run_source, Datasets, ExperimentConfig};
use dadee_core::inference::{sweep, SweepResult};
use dadee_core::model::{Checkpoint, EncoderBundle, Phase, Provenance};
use dadee_core::{Error, Result};

pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_name(phase: Phase, seed: u64) -> String {
    format!("{}-seed{seed:04}.ckpt.json", phase.slug())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

struct Loaded {
    path: PathBuf,
    provenance: Provenance,
    bundle: EncoderBundle,
}

fn load(path: &Path, ctx: &Context, data: &Datasets) -> Result<Loaded> {
    let ckpt = Checkpoint::load(path)?;
    let digest = ctx.config.digest();
    if ckpt.provenance.config_digest != digest {
        return Err(Error::Checkpoint(format!(
            "{}: config digest {} does not match the current config ({digest})",
            path.display(),
            ckpt.provenance.config_digest
        )));
    }
    if ckpt.config != data.encoder {
        return Err(Error::Checkpoint(format!("{}: encoder config differs from the data", path.display())));
    }
    Ok(Loaded {
        path: path.to_path_buf(),
        provenance: ckpt.provenance.clone(),
        bundle: ckpt.to_bundle()?,
    })
}

fn require_phase(c: &Loaded, phase: Phase, what: &str) -> Result<()> {
    if c.provenance.phase != phase {
        return Err(Error::Checkpoint(format!(
            "{what}: {} has phase {:?}, expected {phase:?}",
            c.path.display(),
            c.provenance.phase
        )));
    }
    Ok(())
}

/// The checkpoints named on the command line, or else the `phase`
/// checkpoint of every configured seed in the output directory.
fn inputs(ctx: &Context, data: &Datasets, phase: Phase) -> Result<Vec<Loaded>> {
    if ctx.checkpoints.is_empty() {
        ctx.config
            .seeds
            .iter()
            .map(|&s| load(&ctx.out.join(checkpoint_name(phase, s)), ctx, data))
            .collect()
    } else {
        ctx.checkpoints.iter().map(|p| load(p, ctx, data)).collect()
    }
}

fn save(ctx: &Context, bundle: &EncoderBundle, phase: Phase, seed: u64) -> Result<()> {
    let prov = Provenance { phase, seed, config_digest: ctx.config.digest() };
    let path = ctx.out.join(checkpoint_name(phase, seed));
    Checkpoint::from_bundle(bundle, prov).save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn prepare(ctx: &Context) -> Result<Datasets> {
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    prepare_data(&ctx.config)
}

pub fn train_source(ctx: &Context) -> Result<()> {
    let data = prepare(ctx)?;
    for &seed in &ctx.config.seeds {
        let (bundle, history) = run_source(&ctx.config, &data, seed)?;
        save(ctx, &bundle, Phase::SourceTrained, seed)?;
        write(&ctx.out.join(format!("source-seed{seed:04}.history.csv")), &history.to_csv())?;
    }
    Ok(())
}

pub fn adapt(ctx: &Context) -> Result<()> {
    let data = prepare(ctx)?;
    for source in inputs(ctx, &data, Phase::SourceTrained)? {
        require_phase(&source, Phase::SourceTrained, "adapt")?;
        let seed = source.provenance.seed;
        let adapted = run_adapt(&ctx.config.adaptation, &data, &source.bundle, seed, false)?;
        save(ctx, &adapted.target, Phase::Adapted, seed)?;
        write(&ctx.out.join(format!("adapted-seed{seed:04}.history.csv")), &adapted.history.to_csv())?;
    }
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let data = prepare(ctx)?;
    let mut by_seed: BTreeMap<u64, (Option<Loaded>, Option<Loaded>)> = BTreeMap::new();
    if ctx.checkpoints.is_empty() {
        for &seed in &ctx.config.seeds {
            let src = load(&ctx.out.join(checkpoint_name(Phase::SourceTrained, seed)), ctx, &data)?;
            let adapted_path = ctx.out.join(checkpoint_name(Phase::Adapted, seed));
            let adapted = adapted_path.exists().then(|| load(&adapted_path, ctx, &data)).transpose()?;
            by_seed.insert(seed, (Some(src), adapted));
        }
    } else {
        for c in inputs(ctx, &data, Phase::SourceTrained)? {
            let entry = by_seed.entry(c.provenance.seed).or_default();
            let slot = match c.provenance.phase {
                Phase::SourceTrained => &mut entry.0,
                Phase::Adapted => &mut entry.1,
            };
            if slot.is_some() {
                return Err(Error::input(format!(
                    "evaluate: two {:?} checkpoints for seed {}",
                    c.provenance.phase, c.provenance.seed
                )));
            }
            *slot = Some(c);
        }
    }

    let mut reports: Vec<ExperimentReport> = Vec::new();
    for (seed, (source, adapted)) in by_seed {
        let source = source
            .ok_or_else(|| Error::input(format!("evaluate: seed {seed} has no source-trained checkpoint")))?;
        let report = build_report(&ctx.config, &data, &source.bundle, adapted.as_ref().map(|a| &a.bundle), seed)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write(&ctx.out.join(format!("report-seed{seed:04}.json")), &json)?;
        let mut csv = String::from("metric,value\n");
        for (name, v) in report.metrics() {
            csv.push_str(&format!("{name},{v}\n"));
        }
        write(&ctx.out.join(format!("report-seed{seed:04}.csv")), &csv)?;
        reports.push(report);
    }
    if reports.len() >= 2 {
        let summary = multi_seed_summary(&reports)?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        write(&ctx.out.join("summary.json"), &json)?;
        let mut csv = String::from("metric,mean,std\n");
        for (name, m) in &summary {
            csv.push_str(&format!("{name},{},{}\n", m.mean, m.std));
        }
        write(&ctx.out.join("summary.csv"), &csv)?;
    }
    Ok(())
}

/// The explicit checkpoints, or per seed the adapted checkpoint when one
/// exists and the source checkpoint otherwise.
fn latest(ctx: &Context, data: &Datasets) -> Result<Vec<Loaded>> {
    if !ctx.checkpoints.is_empty() {
        return inputs(ctx, data, Phase::Adapted);
    }
    ctx.config
        .seeds
        .iter()
        .map(|&s| {
            let adapted = ctx.out.join(checkpoint_name(Phase::Adapted, s));
            let path = if adapted.exists() { adapted } else { ctx.out.join(checkpoint_name(Phase::SourceTrained, s)) };
            load(&path, ctx, data)
        })
        .collect()
}

pub fn sweep_alpha(ctx: &Context) -> Result<()> {
    let data = prepare(ctx)?;
    for c in latest(ctx, &data)? {
        let seed = c.provenance.seed;
        let points = sweep(&c.bundle, &data.target_test, &ctx.config.search_space)?;
        let alpha_star = choose_alpha(&ctx.config, &data, &c.bundle)?.alpha_star;
        let result = SweepResult { points, alpha_star };
        let name = format!("sweep-{}-seed{seed:04}.csv", c.provenance.phase.slug());
        write(&ctx.out.join(name), &result.to_csv())?;
    }
    Ok(())
}

pub fn export(ctx: &Context, layer: Option<usize>) -> Result<()> {
    let data = prepare(ctx)?;
    let layer = layer.unwrap_or(ctx.config.probe_layer());
    let (sn, tn) = ctx.config.domain_names();
    for c in latest(ctx, &data)? {
        let mut table = export_features(&c.bundle, &data.source_test, layer, &sn)?;
        table.extend(export_features(&c.bundle, &data.target_test, layer, &tn)?)?;
        let name = format!("features-{}-seed{:04}-layer{layer}.csv", c.provenance.phase.slug(), c.provenance.seed);
        write(&ctx.out.join(name), &table.to_csv())?;
    }
    Ok(())
}
