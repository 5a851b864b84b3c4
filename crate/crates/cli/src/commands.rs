use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use eedlab_core::actions::make_cyclic_shift_action;
use eedlab_core::io::{
    build_rotated_dataset, import_idx, load_model, save_model, synthesize_dataset,
    write_report_csv, write_report_json, ActivationGrid, Dataset,
};
use eedlab_core::metrics::{
    channelwise_eed_on, generic_eed_on, latent_eed_on, softmax_eed_on, FunctionOrbits,
};
use eedlab_core::runtime::{lift_filters, Layer};
use eedlab_core::{
    build_c4_equivariant_model, build_standard_cnn, filter_orbit_metric, make_dihedral_action,
    make_reflection_action, make_regular_channel_action_any, make_rotation_action,
    make_trivial_action, select_samples, verify_action_axiom, verify_group_axioms, Carrier,
    EedOptions, EedReport, EvalFunction, FiniteGroup, GroupAction, GroupKind, ModelSpec,
    OrbitSource, Tensor,
};
use serde_json::{json, Value};

use crate::args::{
    Cli, Command, CommonArgs, EedCommand, FilterOrbitArgs, ModelInitArgs, ModelKind, RotateArgs,
    SynthesizeArgs, VerifyArgs,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] eedlab_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_degenerate() => 3,
            CliError::Core(_) | CliError::Failed(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eed { metric } => eed(metric),
        Command::FilterOrbit(a) => filter_orbit(a),
        Command::Synthesize(a) => synthesize(a),
        Command::RotateDataset(a) => rotate_dataset(a),
        Command::Verify(a) => verify(a),
        Command::ModelInit(a) => model_init(a),
    }
}

/// Builds the named action. `carrier` is what the action will be applied
/// to: input images or hidden stacks.
fn parse_action(name: &str, group: &FiniteGroup, carrier: Carrier) -> Result<GroupAction> {
    let built = match name {
        "rot" => match group.kind() {
            GroupKind::Dihedral(_) => make_dihedral_action(group),
            _ => make_rotation_action(group, carrier),
        },
        "reflect-v" => make_reflection_action(group),
        "trivial" => Ok(make_trivial_action(group, Carrier::Any)),
        other => match other.strip_prefix("regular:") {
            Some(n) => {
                let n: usize = n
                    .parse()
                    .map_err(|_| usage(format!("bad regular action {other:?}")))?;
                if n != group.order() {
                    return Err(usage(format!(
                        "regular:{n} does not match the order {} of {group}",
                        group.order()
                    )));
                }
                make_regular_channel_action_any(group)
            }
            None => {
                return Err(usage(format!(
                    "unknown action {other:?} (expected rot, reflect-v, regular:<n> or trivial)"
                )))
            }
        },
    };
    built.map_err(|e| usage(e.to_string()))
}

/// Where the orbits come from: a model and dataset, or dumped activations.
enum Source {
    Model {
        model: ModelSpec,
        data: Dataset,
        picked: Vec<usize>,
    },
    Grid(ActivationGrid),
}

struct Prepared {
    source: Source,
    input_action: GroupAction,
    echo: BTreeMap<String, Value>,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn prepare(c: &CommonArgs, subcommand: &str) -> Result<Prepared> {
    let input_action = parse_action(&c.action, &c.group, Carrier::Spatial)?;
    let mut echo = BTreeMap::new();
    echo.insert("subcommand".into(), json!(subcommand));
    echo.insert("group".into(), json!(c.group.name()));
    echo.insert("action".into(), json!(c.action));
    echo.insert("samples".into(), json!(c.samples));
    echo.insert("seed".into(), json!(c.seed));
    echo.insert("bootstrap_resamples".into(), json!(c.bootstrap));
    echo.insert("per_pair".into(), json!(c.per_pair));
    echo.insert(
        "rotation_convention".into(),
        json!(eedlab_core::ROTATION_CONVENTION),
    );
    let source = if let Some(acts) = &c.activations {
        let tap = c.tap.as_deref().expect("clap requires --tap");
        let grid = ActivationGrid::load(acts, tap)?;
        if grid.group() != &c.group {
            return Err(usage(format!(
                "activation manifest uses {} but --group is {}",
                grid.group(),
                c.group
            )));
        }
        let rows = select_samples(grid.sample_count(), c.samples, c.seed);
        let grid = grid.select(&rows)?;
        echo.insert("activations".into(), json!(path_str(acts)));
        echo.insert("tap".into(), json!(tap));
        echo.insert("sample_indices".into(), json!(grid.sample_indices()));
        Source::Grid(grid)
    } else {
        let model_path = c.model.as_ref().expect("clap requires --model");
        let data_path = c.data.as_ref().expect("clap requires --data");
        let model = load_model(model_path)?;
        let data = Dataset::load(data_path)?;
        let picked = select_samples(data.len(), c.samples, c.seed);
        echo.insert("model".into(), json!(path_str(model_path)));
        echo.insert("data".into(), json!(path_str(data_path)));
        echo.insert("split".into(), json!(data.manifest.split));
        echo.insert("sample_indices".into(), json!(picked));
        Source::Model {
            model,
            data,
            picked,
        }
    };
    Ok(Prepared {
        source,
        input_action,
        echo,
    })
}

fn options(c: &CommonArgs) -> EedOptions {
    EedOptions {
        ci_level: 0.95,
        bootstrap_resamples: c.bootstrap,
        seed: c.seed,
    }
}

fn resolve_layer(model: &ModelSpec, layer: Option<usize>, default: usize) -> Result<usize> {
    let l = layer.unwrap_or(default);
    if l == 0 || l > model.layers.len() {
        return Err(usage(format!(
            "--layer {l} outside [1, {}]",
            model.layers.len()
        )));
    }
    Ok(l)
}

/// Runs `metric` over whichever orbit source was prepared.
fn with_source<T>(
    p: &Prepared,
    layer: Option<usize>,
    default_layer: impl Fn(&ModelSpec) -> Result<usize>,
    echo: &mut BTreeMap<String, Value>,
    metric: impl Fn(&dyn OrbitSource) -> eedlab_core::Result<T>,
) -> Result<T> {
    match &p.source {
        Source::Grid(grid) => Ok(metric(grid)?),
        Source::Model {
            model,
            data,
            picked,
        } => {
            let l = resolve_layer(model, layer, default_layer(model)?)?;
            echo.insert("layer".into(), json!(l));
            let xs: Vec<Tensor> = picked.iter().map(|&i| data.images[i].clone()).collect();
            let prefix = model.prefix(l)?;
            let orbits = FunctionOrbits {
                f: &prefix,
                action: &p.input_action,
                data: &xs,
            };
            Ok(metric(&orbits)?)
        }
    }
}

fn eed(cmd: EedCommand) -> Result<()> {
    let (common, report) = match &cmd {
        EedCommand::Channelwise {
            common,
            hidden_action,
        } => {
            let mut p = prepare(common, "eed channelwise")?;
            let hidden_name = hidden_action
                .clone()
                .unwrap_or_else(|| common.action.clone());
            let hidden = parse_action(&hidden_name, &common.group, Carrier::Stack)?;
            p.echo.insert("hidden_action".into(), json!(hidden_name));
            let mut echo = p.echo.clone();
            let input = p.input_action.describe();
            let report = with_source(
                &p,
                common.layer,
                |m| {
                    m.block_ends
                        .first()
                        .copied()
                        .ok_or_else(|| usage("model declares no blocks; pass --layer"))
                },
                &mut echo,
                |src| channelwise_eed_on(src, input.clone(), &hidden, &options(common)),
            )?;
            (common, finish(report, echo))
        }
        EedCommand::Latent {
            common,
            metric,
            norm_samples,
            norm_data,
            m_on_ood,
            no_normalize,
        } => {
            let mut p = prepare(common, "eed latent")?;
            let normalize = !no_normalize;
            p.echo.insert("metric".into(), json!(metric.as_str()));
            p.echo.insert("normalize".into(), json!(normalize));
            p.echo.insert("norm_samples".into(), json!(norm_samples));
            p.echo.insert("m_on_ood".into(), json!(m_on_ood));
            let norm_features = if normalize {
                latent_norm_features(
                    &mut p,
                    common.layer,
                    *norm_samples,
                    norm_data.as_deref(),
                    *m_on_ood,
                    common.seed,
                )?
            } else {
                Vec::new()
            };
            let mut echo = p.echo.clone();
            let input = p.input_action.describe();
            let report = with_source(
                &p,
                common.layer,
                |m| Ok(m.split_index),
                &mut echo,
                |src| {
                    latent_eed_on(
                        src,
                        input.clone(),
                        *metric,
                        &norm_features,
                        normalize,
                        &options(common),
                    )
                },
            )?;
            (common, finish(report, echo))
        }
        EedCommand::Softmax { common } => {
            let p = prepare(common, "eed softmax")?;
            let mut echo = p.echo.clone();
            let input = p.input_action.describe();
            let report = with_source(
                &p,
                common.layer,
                |m| Ok(m.layers.len()),
                &mut echo,
                |src| softmax_eed_on(src, input.clone(), &options(common)),
            )?;
            (common, finish(report, echo))
        }
        EedCommand::Generic {
            common,
            metric,
            output_action,
        } => {
            let mut p = prepare(common, "eed generic")?;
            let out_action = parse_action(output_action, &common.group, Carrier::Stack)?;
            p.echo.insert("metric".into(), json!(metric.as_str()));
            p.echo.insert("output_action".into(), json!(output_action));
            let mut echo = p.echo.clone();
            let input = p.input_action.describe();
            let report = with_source(
                &p,
                common.layer,
                |m| Ok(m.layers.len()),
                &mut echo,
                |src| generic_eed_on(src, input.clone(), &out_action, *metric, &options(common)),
            )?;
            (common, finish(report, echo))
        }
    };
    write_outputs(report, common)
}

/// Features for the latent normalization constant. Activation mode reuses
/// the identity-element features of every grid row.
fn latent_norm_features(
    p: &mut Prepared,
    layer: Option<usize>,
    count: usize,
    norm_data: Option<&Path>,
    m_on_ood: bool,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if count < 2 {
        return Err(usage("--norm-samples must be at least 2"));
    }
    let norm_seed = seed.wrapping_add(1);
    match &p.source {
        Source::Grid(grid) => {
            let rows = select_samples(grid.sample_count(), count, norm_seed);
            p.echo.insert("norm_source".into(), json!("activations"));
            Ok(rows
                .iter()
                .map(|&r| grid.orbit(r).map(|mut o| o.swap_remove(0)))
                .collect::<eedlab_core::Result<_>>()?)
        }
        Source::Model { model, data, .. } => {
            let l = resolve_layer(model, layer, model.split_index)?;
            let (reference, label): (Dataset, String) = match norm_data {
                Some(path) if !m_on_ood => (Dataset::load(path)?, path_str(path)),
                _ => (data.clone(), "data".to_string()),
            };
            let rows = select_samples(reference.len(), count, norm_seed);
            p.echo.insert("norm_source".into(), json!(label));
            p.echo.insert("norm_sample_indices".into(), json!(rows));
            let prefix = model.prefix(l)?;
            Ok(rows
                .iter()
                .map(|&r| prefix.eval(&reference.images[r]))
                .collect::<eedlab_core::Result<_>>()?)
        }
    }
}

fn finish(mut report: EedReport, echo: BTreeMap<String, Value>) -> EedReport {
    report.config_echo = echo;
    report
}

fn write_outputs(mut report: EedReport, c: &CommonArgs) -> Result<()> {
    if let Some(csv) = &c.csv {
        write_report_csv(&report, csv)?;
    }
    if !c.per_pair {
        report.per_pair.clear();
    }
    write_report_json(&report, &c.out)?;
    println!(
        "{} {} on {}: mean {:.6e} [{:.6e}, {:.6e}] {} over {} pairs",
        report.metric_kind.as_str(),
        report.distance,
        report.group_name,
        report.mean,
        report.ci_low,
        report.ci_high,
        report.units,
        report.pair_count
    );
    if report.degenerate_terms > 0 {
        println!(
            "{} degenerate channel terms excluded",
            report.degenerate_terms
        );
    }
    Ok(())
}

fn filter_orbit(a: FilterOrbitArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let layer = model.layers.get(a.layer).ok_or_else(|| {
        usage(format!(
            "--layer {} outside [0, {})",
            a.layer,
            model.layers.len()
        ))
    })?;
    let filters = match layer {
        Layer::Conv2d { weight, .. } => weight.clone(),
        Layer::GroupConvLift { base, .. } => lift_filters(base)?,
        other => {
            return Err(usage(format!(
                "layer {} is {}, not conv2d or groupconv-lift",
                a.layer,
                other.kind_name()
            )))
        }
    };
    let value = filter_orbit_metric(&filters, &a.group, a.trials, a.seed)?;
    println!("filter-orbit {}: {value:.6e}", a.group);
    if let Some(out) = &a.out {
        let doc = json!({
            "metric": "filter-orbit",
            "group": a.group.name(),
            "value": value,
            "config_echo": {
                "model": path_str(&a.model),
                "layer": a.layer,
                "trials": a.trials,
                "seed": a.seed,
            },
        });
        write_text(
            out,
            &serde_json::to_string_pretty(&doc).expect("json value"),
        )?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| eedlab_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, format!("{text}\n")).map_err(|e| {
        eedlab_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn synthesize(a: SynthesizeArgs) -> Result<()> {
    let ds = synthesize_dataset(a.kind.into(), a.count, a.size, a.classes, a.seed)?;
    let path = ds.save(&a.out)?;
    println!("wrote {} items to {}", ds.len(), path.display());
    Ok(())
}

fn rotate_dataset(a: RotateArgs) -> Result<()> {
    let src = match (&a.data, &a.idx_images, &a.idx_labels) {
        (Some(d), _, _) => Dataset::load(d)?,
        (None, Some(imgs), Some(labels)) => import_idx(imgs, labels, "idx", "unknown")?,
        _ => return Err(usage("pass --data or --idx-images with --idx-labels")),
    };
    let exclude: BTreeSet<usize> = a.exclude.iter().copied().collect();
    let ds = build_rotated_dataset(&src, &a.group, a.mask, &exclude, a.seed)?;
    let path = ds.save(&a.out)?;
    println!(
        "wrote {} items ({} classes) to {}",
        ds.len(),
        ds.manifest.classes,
        path.display()
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let groups_ok = verify_group_axioms(&a.group);
    println!(
        "group axioms for {}: {}",
        a.group,
        if groups_ok { "ok" } else { "FAILED" }
    );
    let (action, dims): (GroupAction, Vec<usize>) = if a.action == "shift" {
        (make_cyclic_shift_action(&a.group, a.size)?, vec![a.size])
    } else {
        let carrier = if a.channels > 1 {
            Carrier::Stack
        } else {
            Carrier::Spatial
        };
        let dims = if a.channels > 1 {
            vec![a.channels, a.size, a.size]
        } else {
            vec![a.size, a.size]
        };
        (parse_action(&a.action, &a.group, carrier)?, dims)
    };
    let report = verify_action_axiom(&action, &dims, a.samples, a.seed)?;
    let kind = if report.exact {
        "exact"
    } else {
        "interpolated"
    };
    println!(
        "action law for {} on {:?} ({kind}): {} pairs, max deviation {:.3e}{}",
        action.describe(),
        dims,
        report.pairs_checked,
        report.max_deviation,
        if report.holds { "" } else { " FAILED" }
    );
    if groups_ok && report.holds {
        Ok(())
    } else {
        Err(CliError::Failed("verification failed".into()))
    }
}

fn model_init(a: ModelInitArgs) -> Result<()> {
    let model = match a.kind {
        ModelKind::C4 => {
            build_c4_equivariant_model(a.blocks, a.channels, a.classes, a.size, a.seed)?
        }
        ModelKind::Standard => {
            build_standard_cnn(&vec![a.channels; a.blocks], a.classes, a.size, a.seed)?
        }
    };
    let stem = a.name.clone().unwrap_or_else(|| model.name.clone());
    let path: PathBuf = save_model(&model, &a.out, &stem)?;
    println!(
        "wrote {} ({} layers, block ends {:?}, split {}) to {}",
        model.name,
        model.layers.len(),
        model.block_ends,
        model.split_index,
        path.display()
    );
    Ok(())
}
