use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sigmine_core::corpus::{
    encode_volume, generate_volume, ClassSpec, EncodeManifest, MotifClass, PatchGrid, SyntheticVolume, VolumeSampler,
    VolumeSpec,
};
use sigmine_core::eval::{
    evaluate_ranking, kmeans_purity, mean_curve, run_query, write_curves_csv, write_metrics, QueryMember, QuerySet,
    Representation, SearchSpace,
};
use sigmine_core::mih::{recall_simulation, DEFAULT_BUCKET_COUNT};
use sigmine_core::store::{read_record_file, write_record_file, ShardedStore};
use sigmine_core::trainer::{
    train as fit, AugmentationConfig, EncoderModel, Layout, LossConfig, LossKind, TrainConfig,
};
use sigmine_core::{Error, MihIndex, Result, Signature, SignatureRecord, VoxelCoord};
use sigmine_service::{query_response, QueryTarget, ServiceConfig};

use crate::{
    BuildIndexArgs, EncodeArgs, EvalArgs, GenerateArgs, IngestArgs, LayoutArg, LossArg, QueryArgs, RecallArgs,
    ServeArgs, TrainArgs,
};

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| usage(format!("{what}: cannot parse {p:?}")))
        })
        .collect()
}

/// `a,b,c` or a single value repeated.
fn parse_triple<T: std::str::FromStr + Copy>(s: &str, what: &str) -> Result<[T; 3]> {
    match parse_list::<T>(s, what)?.as_slice() {
        [v] => Ok([*v; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(usage(format!(
            "{what} takes one or three comma-separated values, got {s:?}"
        ))),
    }
}

fn parse_class(spec: &str, id: u32) -> Result<ClassSpec> {
    let (shape, count) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("class {spec:?} must look like shape:count")))?;
    let class = match shape {
        "bar" => MotifClass::bar(id),
        "ring" => MotifClass::ring(id),
        "blob" => MotifClass::blob(id),
        other => return Err(usage(format!("unknown motif shape {other:?}; use bar, ring or blob"))),
    };
    let count = count
        .parse()
        .map_err(|_| usage(format!("class {spec:?}: count must be a non-negative integer")))?;
    Ok(ClassSpec { class, count })
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let classes = a
        .classes
        .iter()
        .enumerate()
        .map(|(i, s)| parse_class(s, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let mut spec = VolumeSpec::new(parse_triple(&a.extent, "extent")?, classes, a.seed);
    spec.min_spacing = a.min_spacing;
    spec.margin = parse_triple(&a.margin, "margin")?;
    spec.background = a.background;
    spec.noise_sigma = a.noise;
    let vol = generate_volume(&spec)?;
    vol.save(&a.out)?;
    eprintln!(
        "wrote {} ({:?} voxels, {} sites, checksum {:016x})",
        a.out.display(),
        vol.dims(),
        vol.sites.len(),
        vol.checksum()
    );
    Ok(())
}

fn write_trace(path: &Path, phases: &[(&str, &[f64])]) -> Result<()> {
    let mut out = String::from("phase,step,loss\n");
    for (name, trace) in phases {
        for (i, v) in trace.iter().enumerate() {
            out.push_str(&format!("{name},{},{v}\n", i + 1));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let vol = SyntheticVolume::load(&a.volume)?;
    let shape: [usize; 3] = parse_triple(&a.patch, "patch")?;
    let model = match &a.init {
        Some(p) => EncoderModel::load(p)?,
        None => {
            let layout = match a.layout {
                LayoutArg::Planar => Layout::Planar,
                LayoutArg::Volumetric => Layout::Volumetric,
            };
            EncoderModel::new(layout, shape, a.bits, a.seed)?
        }
    };
    let loss = LossConfig {
        temperature: a.temperature,
        margin: a.margin,
        batch_pairs: a.batch_pairs,
    };
    let kind = match a.loss {
        LossArg::NtXent => LossKind::NtXent,
        LossArg::Triplet => LossKind::Triplet,
    };
    let aug = AugmentationConfig {
        seed: a.seed,
        ..AugmentationConfig::default()
    };
    let sampler = VolumeSampler::new(&vol, model.input_shape, a.min_gradient);
    let real_cfg = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        seed: a.seed,
        momentum: a.momentum,
        loss: kind,
        allow_binary_from_scratch: false,
    };
    let (mut model, real_trace) = if model.binarize || a.steps == 0 {
        (model, Vec::new())
    } else {
        fit(&sampler, model, &loss, &aug, &real_cfg)?
    };
    let mut bin_trace = Vec::new();
    if a.binary_steps > 0 {
        model.binarize = true;
        let cfg = TrainConfig {
            steps: a.binary_steps,
            learning_rate: a.binary_lr,
            seed: a.seed.wrapping_add(1),
            allow_binary_from_scratch: a.binary_from_scratch,
            ..real_cfg
        };
        let (m, t) = fit(&sampler, model, &loss, &aug, &cfg)?;
        model = m;
        bin_trace = t;
    }
    model.save(&a.out)?;
    if let Some(p) = &a.trace {
        write_trace(p, &[("real", &real_trace), ("binary", &bin_trace)])?;
    }
    let tail = |t: &[f64]| {
        let n = t.len().min(20);
        if n == 0 {
            f64::NAN
        } else {
            t[t.len() - n..].iter().sum::<f64>() / n as f64
        }
    };
    eprintln!(
        "wrote {} (real steps {}, binary steps {}, final loss real {:.4} binary {:.4})",
        a.out.display(),
        model.real_steps,
        model.binary_steps,
        tail(&real_trace),
        tail(&bin_trace)
    );
    Ok(())
}

pub fn encode(a: &EncodeArgs) -> Result<()> {
    let vol = SyntheticVolume::load(&a.volume)?;
    let model = EncoderModel::load(&a.model)?;
    let shape = model.input_shape;
    let grid = PatchGrid::new(vol.dims(), shape, a.stride)?;
    let records = encode_volume(&vol, &model, shape, a.stride)?;
    write_record_file(&a.out, &records)?;
    let manifest = EncodeManifest {
        extent: vol.dims(),
        origin: grid.origin(),
        stride: a.stride,
        patch_shape: shape,
        records: records.len(),
    };
    manifest.save(&EncodeManifest::path_for(&a.out))?;
    eprintln!("wrote {} ({} records)", a.out.display(), records.len());
    Ok(())
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let manifest = EncodeManifest::load(&EncodeManifest::path_for(&a.records))?;
    let records = read_record_file(&a.records)?;
    if records.len() != manifest.records {
        return Err(Error::Format(format!(
            "{} holds {} records but its manifest lists {}",
            a.records.display(),
            records.len(),
            manifest.records
        )));
    }
    let grid = PatchGrid::new(manifest.extent, manifest.patch_shape, manifest.stride)?;
    let store = ShardedStore::ingest(records, grid.store_config(a.shard_size))?;
    store.save(&a.out)?;
    eprintln!(
        "wrote {} ({} records in {} shards, {} dropped as over-duplicated)",
        a.out.display(),
        store.len(),
        store.shard_count(),
        manifest.records - store.len()
    );
    Ok(())
}

pub fn build_index(a: &BuildIndexArgs) -> Result<()> {
    let store = ShardedStore::load(&a.store)?;
    let index = MihIndex::build(store.records().copied().collect(), a.partitions, a.seed)?;
    index.save(&a.out)?;
    eprintln!(
        "wrote {} ({} records, {} tables, sizes {:?})",
        a.out.display(),
        index.len(),
        index.partition_count(),
        index.table_sizes()
    );
    Ok(())
}

pub fn query(a: &QueryArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    let store_dir = a.store.clone().unwrap_or(cfg.store);
    let index_path = a.index.clone().unwrap_or(cfg.index);
    let target = match (a.x, a.y, a.z, &a.signature) {
        (Some(x), Some(y), Some(z), None) => QueryTarget::Point(VoxelCoord::new(x, y, z)),
        (None, None, None, Some(s)) => QueryTarget::Signature(s.parse()?),
        _ => return Err(usage("give either --x --y --z or --signature")),
    };
    let store = ShardedStore::load(&store_dir)?;
    let index = MihIndex::load(&index_path, cfg.bucket_count)?;
    let resp = query_response(&store, &index, target, a.k.unwrap_or(cfg.k), a.t.unwrap_or(cfg.t))?;
    let text = serde_json::to_string_pretty(&resp).map_err(|e| Error::Format(e.to_string()))?;
    println!("{text}");
    Ok(())
}

/// Metrics and curves of one evaluation run.
pub struct Evaluation {
    pub metrics: Vec<(String, f64)>,
    pub single: Vec<f64>,
    pub multi: Option<Vec<f64>>,
}

const REPORTED_RANKS: [usize; 5] = [1, 5, 10, 20, 50];

fn at_ranks(prefix: &str, curve: &[f64], k: usize, out: &mut Vec<(String, f64)>) {
    for r in REPORTED_RANKS {
        if r <= k {
            if let Some(v) = curve.get(r - 1) {
                out.push((format!("{prefix}precision_at_{r}"), *v));
            }
        }
    }
}

pub fn evaluate(a: &EvalArgs) -> Result<Evaluation> {
    if a.k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let store = ShardedStore::load(&a.store)?;
    let records: Vec<SignatureRecord> = store.records().copied().collect();
    let index = a
        .index
        .as_deref()
        .map(|p| MihIndex::load(p, DEFAULT_BUCKET_COUNT))
        .transpose()?;
    let space = match &index {
        Some(i) => SearchSpace::Index(i),
        None => SearchSpace::Signatures(&records),
    };
    let searched = SyntheticVolume::load(&a.volume)?;
    let query_vol = SyntheticVolume::load(&a.queries)?;
    let model = EncoderModel::load(&a.model)?;
    let shape = model.input_shape;

    let truth: Vec<VoxelCoord> = searched
        .sites
        .iter()
        .filter(|s| s.class == a.class)
        .map(|s| s.coord)
        .collect();
    let mut queries = Vec::new();
    for s in query_vol.sites.iter().filter(|s| s.class == a.class) {
        let patch = query_vol
            .patch_at(s.coord, shape)
            .ok_or_else(|| Error::Contract(format!("query site {} is too close to the border", s.coord)))?;
        queries.push(Signature::from_signs(&model.encode(&patch)?)?);
    }
    if queries.is_empty() {
        return Err(Error::Contract(format!(
            "the query volume has no sites of class {}",
            a.class
        )));
    }
    if truth.is_empty() {
        return Err(Error::Contract(format!(
            "the searched volume has no sites of class {}",
            a.class
        )));
    }

    let mut curves = Vec::new();
    let mut ranked = 0usize;
    let mut recall = 0.0;
    for q in &queries {
        let ranking = run_query(space, &QuerySet::new(None, Representation::Signature(*q)), a.t, a.k)?;
        let report = evaluate_ranking(&ranking, &truth, a.radius)?;
        ranked += ranking.len();
        recall += report.matched as f64 / truth.len() as f64;
        curves.push(report.interpolated);
    }
    let single = mean_curve(&curves);
    let n = queries.len() as f64;
    let mut metrics = vec![
        ("queries".to_string(), n),
        ("truth_sites".to_string(), truth.len() as f64),
        ("records".to_string(), records.len() as f64),
        ("mean_ranked".to_string(), ranked as f64 / n),
        ("mean_recall".to_string(), recall / n),
    ];
    at_ranks("", &single, a.k, &mut metrics);

    let multi = if a.multi > 0 {
        if a.multi > queries.len() {
            return Err(usage(format!(
                "--multi {} exceeds the {} available queries",
                a.multi,
                queries.len()
            )));
        }
        let set = QuerySet::from_members(
            queries[..a.multi]
                .iter()
                .map(|q| QueryMember {
                    source: None,
                    repr: Representation::Signature(*q),
                })
                .collect(),
        )?;
        let ranking = run_query(space, &set, a.t, a.k)?;
        let report = evaluate_ranking(&ranking, &truth, a.radius)?;
        metrics.push(("multi_queries".to_string(), a.multi as f64));
        metrics.push(("multi_recall".to_string(), report.matched as f64 / truth.len() as f64));
        at_ranks("multi_", &report.interpolated, a.k, &mut metrics);
        Some(report.interpolated)
    } else {
        None
    };

    if a.cluster {
        let ids: BTreeMap<u32, usize> = searched
            .sites
            .iter()
            .map(|s| s.class)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, i))
            .collect();
        let mut vectors = Vec::new();
        let mut classes = Vec::new();
        for s in &searched.sites {
            let patch = searched
                .patch_at(s.coord, shape)
                .ok_or_else(|| Error::Contract(format!("site {} is too close to the border", s.coord)))?;
            vectors.push(model.encode_real(&patch)?);
            classes.push(ids[&s.class]);
        }
        let report = kmeans_purity(&vectors, &classes, ids.len(), a.seed)?;
        metrics.push(("cluster_purity".to_string(), report.purity));
    }
    Ok(Evaluation { metrics, single, multi })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ev = evaluate(a)?;
    match &a.out {
        Some(p) => write_metrics(p, &ev.metrics)?,
        None => {
            for (name, v) in &ev.metrics {
                println!("{name} {v}");
            }
        }
    }
    if let Some(p) = &a.curves {
        let mut cols: Vec<(&str, &[f64])> = vec![("single_mean", &ev.single)];
        if let Some(m) = &ev.multi {
            cols.push(("multi", m));
        }
        write_curves_csv(p, &cols)?;
    }
    Ok(())
}

pub fn simulate_recall(a: &RecallArgs) -> Result<()> {
    let curve = recall_simulation(a.n, a.bits, a.trials, a.seed)?;
    let mut text = String::from("distance,recall\n");
    for (d, r) in curve.iter().enumerate() {
        text.push_str(&format!("{d},{r}\n"));
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if let Some(s) = &a.store {
        cfg.store = s.clone();
    }
    if let Some(i) = &a.index {
        cfg.index = i.clone();
    }
    if let Some(v) = &a.volume {
        cfg.volume = Some(v.clone());
    }
    if let Some(l) = &a.session_log {
        cfg.session_log = Some(l.clone());
    }
    if let Some(port) = a.port {
        cfg.bind.set_port(port);
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: "<runtime>".into(),
        source: e,
    })?;
    runtime.block_on(sigmine_service::serve(cfg))
}
