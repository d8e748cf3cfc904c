use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use iconokit::catalog::{
    build_labeling, image_to_statue, ingest_catalog, write_catalog_csv, CatalogFormat, StatueRecord, Style, TaskId,
};
use iconokit::evalharness::{run_suite, shuffled_labeling, CellStatus, Eligibility, EvalConfig, SuiteResult};
use iconokit::features::{
    ingest_embeddings, write_embeddings_binary, write_embeddings_csv, write_rows_binary, write_rows_csv,
    FeatureMatrix, FeatureSource, IMAGE_EMBEDDING_DIM,
};
use iconokit::iconometry::{
    aggregate_by_style, bundled_baselines, measure_landmarks, read_proportions_csv, write_guidelines_json,
    write_proportions_csv, ComponentSummary, COMPONENTS,
};
use iconokit::kgraph::{build_kg, node2vec, Node2VecConfig};
use iconokit::landmarks::{bundled_template, parse_landmarks, write_landmarks, LandmarkSet};
use iconokit::learn::{AdamConfig, Classifier, TrainConfig};
use iconokit::synth::{generate_dataset, synthetic_image_embeddings, SyntheticConfig};
use iconokit::DenseMatrix;

use crate::args::*;
use crate::manifest::{sidecar, ManifestBuilder};
use crate::ValidationError;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        iconokit::Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn load_catalog(path: &Path, m: &mut ManifestBuilder) -> Result<Vec<StatueRecord>> {
    let format = CatalogFormat::from_path(path)
        .ok_or_else(|| invalid(format!("{}: catalog must be a .csv or .json file", path.display())))?;
    let ingest = ingest_catalog(path, format)?;
    m.input(path);
    for r in &ingest.rejections {
        m.warn(format!("catalog row {} rejected ({}): {}", r.row, r.field, r.reason));
    }
    if ingest.records.is_empty() {
        bail!(invalid(format!("{}: no valid statue record", path.display())));
    }
    log::info!("catalog: {} statue(s), {} rejected row(s)", ingest.records.len(), ingest.rejections.len());
    Ok(ingest.records)
}

fn catalog_images(records: &[StatueRecord]) -> BTreeSet<String> {
    records.iter().flat_map(|r| r.image_ids.iter().cloned()).collect()
}

// ---------------------------------------------------------------------------
// measure

fn load_template(path: &Path) -> Result<LandmarkSet> {
    let (mut sets, rejected) = parse_landmarks(&read_input(path)?[..], &path.display().to_string())?;
    if sets.len() != 1 || !rejected.is_empty() {
        bail!(invalid(format!(
            "{}: a template file holds exactly one valid landmark entry, found {} valid and {} rejected",
            path.display(),
            sets.len(),
            rejected.len()
        )));
    }
    Ok(sets.remove(0))
}

pub fn measure(a: &MeasureArgs, m: &mut ManifestBuilder) -> Result<()> {
    let template = match &a.template {
        Some(p) => {
            m.input(p);
            load_template(p)?
        }
        None => bundled_template(),
    };
    let bytes = read_input(&a.landmarks)?;
    m.input(&a.landmarks);
    let (sets, rejected) = if bytes.iter().all(u8::is_ascii_whitespace) {
        m.warn(format!("{} is empty; writing an empty proportion table", a.landmarks.display()));
        (Vec::new(), Vec::new())
    } else {
        parse_landmarks(&bytes[..], &a.landmarks.display().to_string())?
    };
    for r in &rejected {
        m.note(format!("landmark entry {} ({}) rejected: {}", r.index, r.image_id, r.reason));
    }
    if sets.is_empty() && !rejected.is_empty() {
        m.warn("no landmark entry could be read".to_string());
    }
    let measured: Vec<_> = sets.par_iter().map(|s| measure_landmarks(s, &template)).collect();
    let mut proportions = Vec::with_capacity(sets.len());
    let mut guidelines = Vec::with_capacity(sets.len());
    let mut failed = 0;
    for (s, r) in sets.iter().zip(measured) {
        match r {
            Ok((g, p)) => {
                guidelines.push(g);
                proportions.push(p);
            }
            Err(e) => {
                failed += 1;
                m.warn(format!("image {}: {e}", s.image_id));
            }
        }
    }
    let mut w = create(&a.out)?;
    write_proportions_csv(&proportions, &mut w)?;
    w.flush()?;
    m.output(&a.out);
    if let Some(path) = &a.guidelines {
        let mut w = create(path)?;
        write_guidelines_json(&guidelines, &mut w)?;
        w.flush()?;
        m.output(path);
    }
    m.write(&sidecar(&a.out))?;
    println!(
        "measured {} image(s); {} entr{} rejected, {} failed",
        proportions.len(),
        rejected.len(),
        if rejected.len() == 1 { "y" } else { "ies" },
        failed
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

type Statistic = (&'static str, fn(&ComponentSummary) -> f64);

const STATISTICS: [Statistic; 7] = [
    ("mean", |c| c.mean),
    ("std", |c| c.std),
    ("min", |c| c.min),
    ("q1", |c| c.q1),
    ("median", |c| c.median),
    ("q3", |c| c.q3),
    ("max", |c| c.max),
];

fn fmt6(values: impl IntoIterator<Item = f64>) -> impl Iterator<Item = String> {
    values.into_iter().map(|v| format!("{v:.6}"))
}

pub fn analyze(a: &AnalyzeArgs, m: &mut ManifestBuilder) -> Result<()> {
    let bytes = read_input(&a.proportions)?;
    let vectors = read_proportions_csv(&bytes[..], &a.proportions.display().to_string())?;
    m.input(&a.proportions);
    let records = load_catalog(&a.catalog, m)?;
    let style_of: BTreeMap<&str, Style> = records
        .iter()
        .flat_map(|r| r.image_ids.iter().map(move |i| (i.as_str(), r.style)))
        .collect();
    let mut joined = Vec::new();
    let mut unmatched = 0usize;
    for v in vectors {
        match style_of.get(v.image_id.as_str()) {
            Some(&s) => joined.push((s, v)),
            None => unmatched += 1,
        }
    }
    if unmatched > 0 {
        m.warn(format!("{unmatched} proportion row(s) name images missing from the catalog"));
    }
    if joined.is_empty() {
        bail!(invalid("no proportion row matches a catalog image"));
    }
    let stats = aggregate_by_style(&joined);
    let baselines = bundled_baselines();

    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let mut header = vec!["group", "kind", "count", "statistic"];
    header.extend(COMPONENTS);
    w.write_record(&header)?;
    for (style, d) in &stats {
        for (name, get) in STATISTICS {
            let mut row = vec![style.to_string(), "style".into(), d.count.to_string(), name.into()];
            row.extend(fmt6(d.components.iter().map(get)));
            w.write_record(&row)?;
        }
    }
    for b in &baselines {
        let mut row = vec![b.name.as_str().to_string(), "canon".into(), String::new(), "value".into()];
        row.extend(fmt6(b.vector.to_array()));
        w.write_record(&row)?;
    }
    for (style, d) in &stats {
        for b in &baselines {
            let base = b.vector.to_array();
            let mut row = vec![
                style.to_string(),
                format!("delta_{}", b.name.as_str()),
                d.count.to_string(),
                "mean".into(),
            ];
            row.extend(fmt6((0..6).map(|k| d.components[k].mean - base[k])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    m.output(&a.out);

    if let Some(path) = &a.points {
        let mut w = csv::Writer::from_writer(create(path)?);
        let mut header = vec!["image_id", "style"];
        header.extend(COMPONENTS);
        w.write_record(&header)?;
        let mut sorted: Vec<_> = joined.iter().collect();
        sorted.sort_by(|x, y| x.1.image_id.cmp(&y.1.image_id));
        for (style, v) in sorted {
            let mut row = vec![v.image_id.clone(), style.to_string()];
            row.extend(fmt6(v.to_array()));
            w.write_record(&row)?;
        }
        w.flush()?;
        m.output(path);
    }
    m.write(&sidecar(&a.out))?;
    for (style, d) in &stats {
        let means: Vec<String> = COMPONENTS
            .iter()
            .zip(&d.components)
            .map(|(c, s)| format!("{c}={:.3}", s.mean))
            .collect();
        println!("{style}: {} image(s), mean {}", d.count, means.join(" "));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// kg

pub fn kg(a: &KgArgs, m: &mut ManifestBuilder) -> Result<()> {
    let records = load_catalog(&a.catalog, m)?;
    let n = &a.node2vec;
    let cfg = Node2VecConfig {
        walk_length: n.walk_length,
        walks_per_node: n.walks_per_node,
        return_p: n.return_p,
        inout_q: n.inout_q,
        window: n.window,
        negatives: n.negatives,
        epochs: n.epochs,
        learning_rate: n.learning_rate,
        seed: n.seed,
        threads: n.threads,
    };
    cfg.validate()?;
    m.seed(cfg.seed);
    let graph = build_kg(&records, a.time);
    graph.check_bipartite()?;
    std::fs::create_dir_all(&a.out_graph).with_context(|| format!("cannot create {}", a.out_graph.display()))?;
    let edges = a.out_graph.join("edges.tsv");
    let nodes = a.out_graph.join("nodes.csv");
    let mut w = create(&edges)?;
    graph.write_edge_list(&mut w)?;
    w.flush()?;
    let mut w = create(&nodes)?;
    graph.write_node_table(&mut w)?;
    w.flush()?;
    m.output(&edges);
    m.output(&nodes);

    let emb = node2vec(&graph, &cfg)?;
    let matrix = DenseMatrix::from_vec(emb.node_ids.len(), emb.dim, emb.vectors.clone());
    let mut w = create(&a.out_emb)?;
    match a.format {
        EmbeddingFormat::Csv => write_rows_csv("node_id", &emb.node_ids, &matrix, &mut w)?,
        EmbeddingFormat::Bin => write_rows_binary(&emb.node_ids, &matrix, &mut w)?,
    }
    w.flush()?;
    m.output(&a.out_emb);
    m.write(&sidecar(&a.out_emb))?;
    m.write(&a.out_graph.join("manifest.json"))?;
    println!(
        "graph: {} node(s), {} edge(s); embeddings: {} × {}",
        graph.num_nodes(),
        graph.num_edges(),
        emb.node_ids.len(),
        emb.dim
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// embed-ingest

pub fn embed_ingest(a: &EmbedIngestArgs, m: &mut ManifestBuilder) -> Result<()> {
    let source: FeatureSource = a.source.parse()?;
    let known = match &a.catalog {
        Some(p) => Some(catalog_images(&load_catalog(p, m)?)),
        None => None,
    };
    let ingest = ingest_embeddings(&a.input, source, known.as_ref())?;
    m.input(&a.input);
    if !ingest.excluded.is_empty() {
        m.note(format!("{} id(s) not in the catalog were excluded", ingest.excluded.len()));
    }
    let mut w = create(&a.out)?;
    match a.format {
        EmbeddingFormat::Csv => write_embeddings_csv(&ingest.matrix, &mut w)?,
        EmbeddingFormat::Bin => write_embeddings_binary(&ingest.matrix, &mut w)?,
    }
    w.flush()?;
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    println!(
        "{source}: {} sample(s) × {}, {} excluded",
        ingest.matrix.len(),
        ingest.matrix.dim(),
        ingest.excluded.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// classify

/// suite.json: the results plus the settings that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteFile {
    pub manifest: String,
    pub config: EvalConfig,
    pub universe_size: Option<usize>,
    /// Seed of the label-shuffle control, when this run is one.
    pub shuffle_labels: Option<u64>,
    pub suite: SuiteResult,
}

fn parse_list<T>(text: &str, all: &[T], what: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>>
where
    T: Copy + Ord,
{
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(all.to_vec());
    }
    let mut out = BTreeSet::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.insert(parse(item)?);
    }
    if out.is_empty() {
        bail!(invalid(format!("no {what} selected")));
    }
    Ok(out.into_iter().collect())
}

fn parse_task(s: &str) -> Result<TaskId> {
    s.parse::<TaskId>().map_err(invalid)
}

fn parse_eligibility(specs: &[String]) -> Result<Eligibility> {
    let mut e = Eligibility::default();
    for spec in specs {
        let (src, tasks) = spec
            .split_once('=')
            .ok_or_else(|| invalid(format!("--allow expects SOURCE=TASKS, got {spec:?}")))?;
        let source: FeatureSource = src.trim().parse()?;
        let tasks = parse_list(tasks, &TaskId::ALL, "task", parse_task)?;
        e.overrides.entry(source).or_default().extend(tasks);
    }
    Ok(e)
}

pub fn classify(a: &ClassifyArgs, m: &mut ManifestBuilder) -> Result<()> {
    let records = load_catalog(&a.catalog, m)?;
    let known = catalog_images(&records);
    let tasks = parse_list(&a.tasks, &TaskId::ALL, "task", parse_task)?;
    let classifiers = parse_list(&a.classifiers, &Classifier::ALL, "classifier", |s| Ok(s.parse()?))?;
    let eligibility = parse_eligibility(&a.allow)?;
    if a.folds < 2 {
        bail!(invalid(format!("--folds must be at least 2, got {}", a.folds)));
    }
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        svm_epochs: a.svm_epochs,
        penalty_c: a.penalty_c,
        class_weighted: !a.no_class_weights,
        standardize: !a.no_standardize,
        seed: a.seed,
        ..TrainConfig::default()
    };
    train.validate()?;
    let cfg = EvalConfig {
        folds: a.folds,
        seed: a.seed,
        grouped: !a.per_image_folds,
        train,
    };
    m.seed(a.seed);

    let mut matrices: Vec<FeatureMatrix> = Vec::new();
    for spec in &a.features {
        let (src, path) = spec
            .split_once('=')
            .ok_or_else(|| invalid(format!("--features expects SOURCE=PATH, got {spec:?}")))?;
        let source: FeatureSource = src.trim().parse()?;
        if matrices.iter().any(|x| x.source() == source) {
            bail!(invalid(format!("feature source {source} given twice")));
        }
        let path = Path::new(path.trim());
        let ingest = ingest_embeddings(path, source, Some(&known))?;
        m.input(path);
        if !ingest.excluded.is_empty() {
            m.note(format!("{source}: {} id(s) not in the catalog excluded", ingest.excluded.len()));
        }
        log::info!("{source}: {} sample(s) × {}", ingest.matrix.len(), ingest.matrix.dim());
        matrices.push(ingest.matrix);
    }

    let mut universe_size = None;
    if !a.per_source_universe {
        let mut shared: BTreeSet<&String> = known.iter().collect();
        for x in &matrices {
            let ids: BTreeSet<&String> = x.sample_ids().iter().collect();
            shared = shared.intersection(&ids).copied().collect();
        }
        if shared.is_empty() {
            let smallest = matrices
                .iter()
                .min_by_key(|x| x.len())
                .map(|x| format!("{} features ({} samples)", x.source(), x.len()))
                .unwrap_or_default();
            return Err(iconokit::Error::EmptyIntersection { smallest }.into());
        }
        let ids: Vec<String> = shared.into_iter().cloned().collect();
        for x in matrices.iter_mut() {
            if x.len() > ids.len() {
                m.warn(format!(
                    "{}: {} of {} sample(s) kept in the shared universe",
                    x.source(),
                    ids.len(),
                    x.len()
                ));
            }
            *x = x.select(&ids)?;
        }
        universe_size = Some(ids.len());
    }

    let i2s = image_to_statue(&records);
    let labelings: Vec<_> = tasks
        .iter()
        .map(|&t| {
            let l = build_labeling(&records, t);
            match a.shuffle_labels {
                Some(seed) => shuffled_labeling(&l, &i2s, seed),
                None => l,
            }
        })
        .collect();
    let suite = run_suite(&labelings, &matrices, &classifiers, &i2s, &eligibility, &cfg);
    for c in &suite.cells {
        if let CellStatus::Failed { error } = &c.status {
            m.note(format!("{} / {} / {}: {error}", c.task.as_str(), c.source, c.classifier));
        }
    }
    if suite.cells.iter().all(|c| matches!(c.status, CellStatus::Ineligible { .. })) {
        m.note("no eligible task/source/classifier combination".to_string());
    }

    let dir = &a.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let results = dir.join("results.csv");
    let summary = dir.join("summary.csv");
    let table_path = dir.join("table.txt");
    let suite_path = dir.join("suite.json");
    let mut w = create(&results)?;
    suite.write_results_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&summary)?;
    suite.write_summary_csv(&mut w)?;
    w.flush()?;
    let table = suite.render_table();
    std::fs::write(&table_path, &table).with_context(|| format!("cannot write {}", table_path.display()))?;
    let file = SuiteFile {
        manifest: "manifest.json".into(),
        config: cfg,
        universe_size,
        shuffle_labels: a.shuffle_labels,
        suite,
    };
    std::fs::write(&suite_path, serde_json::to_string_pretty(&file)? + "\n")
        .with_context(|| format!("cannot write {}", suite_path.display()))?;
    for p in [&results, &summary, &table_path, &suite_path] {
        m.output(p);
    }
    m.write(&dir.join("manifest.json"))?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn render_markdown(suite: &SuiteResult) -> String {
    let tasks: BTreeSet<TaskId> = suite.cells.iter().map(|c| c.task).collect();
    let mut rows: BTreeMap<(FeatureSource, Classifier), BTreeMap<TaskId, String>> = BTreeMap::new();
    for c in &suite.cells {
        let cell = match &c.status {
            CellStatus::Evaluated { result } => format!("{:.2} ± {:.2}", result.mean.f1, result.std.f1),
            CellStatus::Ineligible { .. } => "—".into(),
            CellStatus::Failed { .. } => "error".into(),
        };
        rows.entry((c.source, c.classifier)).or_default().insert(c.task, cell);
    }
    let mut out = String::from("| Method | Clf |");
    for t in &tasks {
        out.push_str(&format!(" {} |", t.short()));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(tasks.len()));
    out.push('\n');
    for ((s, c), cells) in &rows {
        out.push_str(&format!("| {} | {} |", s.display_name(), c.as_str().to_uppercase()));
        for t in &tasks {
            out.push_str(&format!(" {} |", cells.get(t).map(String::as_str).unwrap_or("")));
        }
        out.push('\n');
    }
    out
}

pub fn report(a: &ReportArgs, m: &mut ManifestBuilder) -> Result<()> {
    let bytes = read_input(&a.suite)?;
    let file: SuiteFile = serde_json::from_slice(&bytes).map_err(|e| {
        iconokit::Error::Parse {
            location: format!("{}:{}:{}", a.suite.display(), e.line(), e.column()),
            message: e.to_string(),
        }
    })?;
    m.input(&a.suite);
    let text = match a.format {
        ReportFormat::Text => file.suite.render_table(),
        ReportFormat::Markdown => render_markdown(&file.suite),
    };
    match &a.out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
            m.output(path);
            m.write(&sidecar(path))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth, template

pub fn synth(a: &SynthArgs, m: &mut ManifestBuilder) -> Result<()> {
    let cfg = SyntheticConfig {
        statues_per_style: a.statues_per_style,
        max_images_per_statue: a.max_images_per_statue,
        china_nose_offset: a.china_nose_offset,
        proportion_noise: a.proportion_noise,
        landmark_noise: a.landmark_noise,
        seed: a.seed,
    };
    if cfg.statues_per_style == 0 || cfg.max_images_per_statue == 0 {
        bail!(invalid("--statues-per-style and --max-images-per-statue must be positive"));
    }
    m.seed(cfg.seed);
    let ds = generate_dataset(&cfg);
    let dir = &a.out_dir;
    let catalog = dir.join("catalog.csv");
    let landmarks = dir.join("landmarks.json");
    let truth = dir.join("truth.csv");
    let mut w = create(&catalog)?;
    write_catalog_csv(&ds.records, &mut w)?;
    w.flush()?;
    let mut w = create(&landmarks)?;
    write_landmarks(&ds.landmarks, &mut w)?;
    w.flush()?;
    let mut w = create(&truth)?;
    write_proportions_csv(&ds.truth, &mut w)?;
    w.flush()?;
    for p in [&catalog, &landmarks, &truth] {
        m.output(p);
    }
    if a.image_embeddings {
        let rows = synthetic_image_embeddings(&ds.records, IMAGE_EMBEDDING_DIM, a.embedding_separation, cfg.seed);
        let matrix = FeatureMatrix::from_rows(FeatureSource::ImageEmbeddingFull, rows)?;
        let path = dir.join("image_embedding_full.csv");
        let mut w = create(&path)?;
        write_embeddings_csv(&matrix, &mut w)?;
        w.flush()?;
        m.output(&path);
    }
    m.write(&dir.join("manifest.json"))?;
    println!("{} statue(s), {} image(s)", ds.records.len(), ds.landmarks.len());
    Ok(())
}

pub fn template(a: &TemplateArgs, m: &mut ManifestBuilder) -> Result<()> {
    let mut w = create(&a.out)?;
    write_landmarks(&[bundled_template()], &mut w)?;
    w.flush()?;
    m.output(&a.out);
    m.write(&sidecar(&a.out))?;
    Ok(())
}
