use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use sitgen::datagen::{
    label_streams, load_corpus, load_demographics, load_embeddings, load_interactions, load_logs, load_mels, load_playlists,
    make_split, save_corpus, save_embeddings, save_jsonl, save_synth_corpus, segment_sessions, synth_generate, validate_split,
    KeywordConfig, KeywordTable, SplitFile, SplitKind, SynthConfig, CORPUS_FILE, DEMOGRAPHICS_FILE, INTERACTIONS_FILE,
    LOGS_FILE, MELS_FILE, PLAYLISTS_FILE, WORLD_FILE,
};
use sitgen::eval::{local_vs_global, render_grid, run_protocol, EvalData, EvalReport, LocalGlobalConfig, LocalGlobalReport, ProtocolConfig, UamatSetup};
use sitgen::features::{assemble_sp_features, train_user_embeddings, AlsConfig, CountryDictionary, MelSpectrogram};
use sitgen::gbdt::{sp_train, SpTrainConfig};
use sitgen::nn::{train, TrainConfig, UamatConfig, UamatExample, UamatModel};
use sitgen::{Demographics, Stream, TaxonomySubset, TrackId, UserId};
use sitgen_service::{build_tag_store, AppState, Candidates, ServiceConfig, Snapshot, SnapshotPaths, StoreInputs};

use crate::manifest::Recorder;
use crate::*;

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Synth(a) => ctx.synth(a),
        Command::Ingest(a) => ctx.ingest(a),
        Command::Split(a) => ctx.split(a),
        Command::Embed(a) => ctx.embed(a),
        Command::TrainUamat(a) => ctx.train_uamat(a),
        Command::TrainSp(a) => ctx.train_sp(a),
        Command::Evaluate(a) => ctx.evaluate(a),
        Command::Report(a) => ctx.report(a),
        Command::BuildStore(a) => ctx.build_store(a),
        Command::Serve(a) => ctx.serve(a),
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
}

fn kind_of(k: Kind) -> SplitKind {
    match k {
        Kind::ColdUser => SplitKind::ColdUser,
        Kind::ColdTrack => SplitKind::ColdTrack,
        Kind::Warm => SplitKind::Warm,
    }
}

fn taxonomy(c: usize) -> Result<TaxonomySubset> {
    Ok(TaxonomySubset::new(c)?)
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cli.data_dir.join(p)
        }
    }

    fn recorder(&self, command: &str, args: &impl serde::Serialize, seeds: Vec<u64>) -> Result<Recorder> {
        let config = serde_json::json!({
            "data_dir": self.cli.data_dir,
            "seed": self.cli.seed,
            "jobs": self.cli.jobs,
            "args": args,
        });
        Ok(Recorder::new(command, config, seeds))
    }

    fn finish(&self, rec: Recorder) -> Result<()> {
        let path = rec.finish(&self.cli.data_dir)?;
        tracing::info!(manifest = %path.display(), "run recorded");
        Ok(())
    }

    fn corpus(&self, p: &Path) -> Result<(TaxonomySubset, Vec<Stream>)> {
        let path = self.path(p);
        load_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))
    }

    fn mels(&self, p: &Path) -> Result<HashMap<TrackId, MelSpectrogram>> {
        let path = self.path(p);
        Ok(load_mels(&path).with_context(|| format!("loading spectrograms {}", path.display()))?.into_iter().collect())
    }

    fn embeddings(&self, p: &Path) -> Result<HashMap<UserId, Vec<f32>>> {
        let path = self.path(p);
        load_embeddings(&path).with_context(|| format!("loading embeddings {}", path.display()))
    }

    fn demographics(&self, p: &Path) -> Result<HashMap<UserId, Demographics>> {
        let path = self.path(p);
        Ok(load_demographics(&path)
            .with_context(|| format!("loading demographics {}", path.display()))?
            .into_iter()
            .collect())
    }

    /// The train side of `split` if given, else every stream.
    fn train_streams(&self, streams: Vec<Stream>, split: Option<&PathBuf>) -> Result<Vec<Stream>> {
        let Some(p) = split else { return Ok(streams) };
        let path = self.path(p);
        let split = SplitFile::load(&path).with_context(|| format!("loading split {}", path.display()))?.split();
        validate_split(&streams, &split).with_context(|| format!("split {} does not fit the corpus", path.display()))?;
        Ok(split.train.iter().map(|&i| streams[i].clone()).collect())
    }

    fn synth(&self, a: &SynthArgs) -> Result<()> {
        let cfg = SynthConfig {
            n_users: a.users,
            n_tracks: a.tracks,
            n_streams: a.streams,
            taxonomy: taxonomy(a.c)?,
            signal_strength: a.signal,
            mel_bands: a.mel_bands,
            mel_frames: a.mel_frames,
            background_plays_per_user: a.background_plays,
            seed: self.cli.seed,
            ..Default::default()
        };
        let mut rec = self.recorder("synth", a, vec![self.cli.seed])?;
        let corpus = synth_generate(&cfg)?;
        let dir = self.path(&a.out);
        save_synth_corpus(&dir, &corpus).with_context(|| format!("writing corpus to {}", dir.display()))?;
        for f in [CORPUS_FILE, PLAYLISTS_FILE, LOGS_FILE, DEMOGRAPHICS_FILE, INTERACTIONS_FILE, MELS_FILE, WORLD_FILE] {
            rec.output(f, &dir.join(f))?;
        }
        rec.output("mels.sgm.index.json", &dir.join(format!("{MELS_FILE}.index.json")))?;
        rec.metric("streams", corpus.streams.len() as f64);
        self.finish(rec)
    }

    fn ingest(&self, a: &IngestArgs) -> Result<()> {
        let tax = taxonomy(a.c)?;
        let mut rec = self.recorder("ingest", a, vec![])?;
        let keywords = match &a.keywords {
            Some(p) => {
                let path = self.path(p);
                rec.input("keywords", &path);
                let cfg: KeywordConfig = serde_json::from_slice(&std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?)
                    .with_context(|| format!("parsing keywords {}", path.display()))?;
                KeywordTable::new(&cfg, tax)?
            }
            None => KeywordTable::defaults(tax),
        };
        let (pl_path, log_path) = (self.path(&a.playlists), self.path(&a.logs));
        rec.input("playlists", &pl_path);
        rec.input("logs", &log_path);
        let playlists = load_playlists(&pl_path).with_context(|| format!("loading playlists {}", pl_path.display()))?;
        let logs = load_logs(&log_path).with_context(|| format!("loading logs {}", log_path.display()))?;
        let (streams, diag) = label_streams(&playlists, &logs, &keywords);
        if streams.is_empty() {
            bail!("no logged stream could be labeled ({} records)", logs.len());
        }
        let out = self.path(&a.out);
        save_corpus(&out, tax, &streams).with_context(|| format!("writing {}", out.display()))?;
        rec.output("corpus", &out)?;
        let sessions = segment_sessions(&streams, a.gap_minutes);
        let sess_path = self.path(&a.sessions);
        save_jsonl(&sess_path, &sessions)?;
        rec.output("sessions", &sess_path)?;
        let diag_path = self.path(&a.diagnostics);
        std::fs::write(&diag_path, diag.to_csv())?;
        rec.output("diagnostics", &diag_path)?;
        rec.metric("labeled", diag.labeled as f64);
        rec.metric("sessions", sessions.len() as f64);
        self.finish(rec)
    }

    fn split(&self, a: &SplitArgs) -> Result<()> {
        let kind = kind_of(a.kind);
        let mut rec = self.recorder("split", a, vec![self.cli.seed])?;
        let (_, streams) = self.corpus(&a.corpus)?;
        rec.input("corpus", &self.path(&a.corpus));
        let split = make_split(&streams, kind, a.test_fraction, self.cli.seed)?;
        let out = self.path(a.out.as_deref().unwrap_or(Path::new(&format!("split_{kind}.json"))));
        let name = a.corpus.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        SplitFile::new(name, &split).save(&out).with_context(|| format!("writing {}", out.display()))?;
        rec.output("split", &out)?;
        rec.metric("train", split.train.len() as f64);
        rec.metric("test", split.test.len() as f64);
        self.finish(rec)
    }

    fn embed(&self, a: &EmbedArgs) -> Result<()> {
        let mut rec = self.recorder("embed", a, vec![self.cli.seed])?;
        let path = self.path(&a.interactions);
        rec.input("interactions", &path);
        let x = load_interactions(&path).with_context(|| format!("loading interactions {}", path.display()))?;
        let cfg = AlsConfig {
            factors: a.factors,
            reg: a.reg,
            alpha: a.alpha,
            iters: a.iters,
            seed: self.cli.seed,
        };
        let f = train_user_embeddings(&x, &cfg)?;
        let emb: HashMap<UserId, Vec<f32>> = f
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), f.user_vector(i).iter().map(|&v| v as f32).collect()))
            .collect();
        let out = self.path(&a.out);
        save_embeddings(&out, &emb).with_context(|| format!("writing {}", out.display()))?;
        rec.output("embeddings", &out)?;
        if let Some(&last) = f.objective.last() {
            rec.metric("objective", last);
        }
        self.finish(rec)
    }

    fn train_uamat(&self, a: &TrainUamatArgs) -> Result<()> {
        let mut rec = self.recorder("train-uamat", a, vec![self.cli.seed])?;
        let (tax, streams) = self.corpus(&a.corpus)?;
        let streams = self.train_streams(streams, a.split.as_ref())?;
        let mels = self.mels(&a.mels)?;
        let emb = self.embeddings(&a.embeddings)?;
        for (name, p) in [("corpus", &a.corpus), ("mels", &a.mels), ("embeddings", &a.embeddings)] {
            rec.input(name, &self.path(p));
        }
        let examples: Vec<UamatExample<'_>> = streams
            .iter()
            .filter_map(|s| {
                Some(UamatExample {
                    mel: mels.get(&s.track)?,
                    user: emb.get(&s.user)?,
                    label: s.situation?,
                })
            })
            .collect();
        let first = examples.first().ok_or_else(|| anyhow!("no labeled stream has both a spectrogram and an embedding"))?;
        if examples.len() < streams.len() {
            tracing::warn!(dropped = streams.len() - examples.len(), "streams without autotagger inputs");
        }
        let config = UamatConfig {
            mel_bands: first.mel.bands,
            mel_frames: first.mel.frames,
            user_dim: first.user.len(),
            taxonomy: tax,
            width: a.width,
            dropout: a.dropout,
        };
        let tcfg = TrainConfig {
            lr0: a.lr,
            batch_size: a.batch_size,
            max_epochs: a.epochs,
            patience: a.patience,
            validation_fraction: a.validation,
            seed: self.cli.seed,
            ..Default::default()
        };
        let (mut model, history) = train(UamatModel::new(config, self.cli.seed)?, &examples, &tcfg)?;
        model.meta.training = Some(tcfg);
        if let Some(best) = history.epochs.get(history.best_epoch) {
            model.meta.metrics.insert("train_accuracy".into(), best.train_accuracy);
            model.meta.metrics.insert("train_loss".into(), best.train_loss);
            if let (Some(l), Some(acc)) = (best.val_loss, best.val_accuracy) {
                model.meta.metrics.insert("val_loss".into(), l);
                model.meta.metrics.insert("val_accuracy".into(), acc);
            }
        }
        model.meta.metrics.insert("epochs".into(), history.epochs.len() as f64);
        let out = self.path(&a.out);
        model.save(&out).with_context(|| format!("writing {}", out.display()))?;
        rec.output("model", &out)?;
        rec.model("uamat", model.hash());
        for (k, v) in &model.meta.metrics {
            rec.metric(k, *v);
        }
        self.finish(rec)
    }

    fn train_sp(&self, a: &TrainSpArgs) -> Result<()> {
        let mut rec = self.recorder("train-sp", a, vec![])?;
        let (tax, streams) = self.corpus(&a.corpus)?;
        let streams = self.train_streams(streams, a.split.as_ref())?;
        let demo = self.demographics(&a.demographics)?;
        rec.input("corpus", &self.path(&a.corpus));
        rec.input("demographics", &self.path(&a.demographics));
        let countries = CountryDictionary::from_countries(demo.values().map(|d| d.country.clone()));
        let unknown = Demographics::unknown();
        let labeled: Vec<&Stream> = streams.iter().filter(|s| s.situation.is_some()).collect();
        let x: Vec<_> = labeled
            .iter()
            .map(|s| assemble_sp_features(&s.device, demo.get(&s.user).unwrap_or(&unknown), &countries))
            .collect();
        let y: Vec<_> = labeled.iter().filter_map(|s| s.situation).collect();
        let cfg = SpTrainConfig {
            rounds: a.rounds,
            max_depth: a.max_depth,
            shrinkage: a.shrinkage,
            ..Default::default()
        };
        let forest = sp_train(&x, &y, tax, &cfg)?;
        let out = self.path(&a.out);
        forest.save(&out).with_context(|| format!("writing {}", out.display()))?;
        rec.output("model", &out)?;
        rec.model("sp", forest.hash());
        if let Some(&l) = forest.train_loss.last() {
            rec.metric("train_loss", l);
        }
        self.finish(rec)
    }

    fn evaluate(&self, a: &EvaluateArgs) -> Result<()> {
        let tax = taxonomy(a.c)?;
        let mut rec = self.recorder("evaluate", a, (0..a.seeds as u64).map(|i| self.cli.seed + i).collect())?;
        let (corpus_tax, streams) = self.corpus(&a.corpus)?;
        if tax.size() > corpus_tax.size() {
            bail!("corpus is labeled with C={}, cannot evaluate C={}", corpus_tax.size(), tax.size());
        }
        let streams: Vec<Stream> = streams
            .into_iter()
            .filter(|s| s.situation.is_some_and(|l| tax.contains(l)))
            .collect();
        let data = EvalData {
            streams,
            mels: if a.no_uamat { HashMap::new() } else { self.mels(&a.mels)? },
            demographics: self.demographics(&a.demographics)?,
            interactions: {
                let p = self.path(&a.interactions);
                load_interactions(&p).with_context(|| format!("loading interactions {}", p.display()))?
            },
        };
        for (name, p) in [("corpus", &a.corpus), ("mels", &a.mels), ("demographics", &a.demographics), ("interactions", &a.interactions)] {
            rec.input(name, &self.path(p));
        }
        let cfg = ProtocolConfig {
            n_seeds: a.seeds,
            seed: self.cli.seed,
            test_fraction: a.test_fraction,
            k: a.k,
            als: AlsConfig {
                factors: a.factors,
                seed: self.cli.seed,
                ..Default::default()
            },
            uamat: (!a.no_uamat).then(|| UamatSetup {
                width: a.width,
                train: TrainConfig {
                    lr0: a.lr,
                    max_epochs: a.epochs,
                    patience: a.patience,
                    ..UamatSetup::default().train
                },
                ..Default::default()
            }),
            sp: (!a.no_sp).then(|| SpTrainConfig {
                rounds: a.sp_rounds,
                ..Default::default()
            }),
            baselines: a.baselines,
        };
        let kinds: Vec<SplitKind> = match a.protocol {
            Protocol::All => SplitKind::ALL.to_vec(),
            Protocol::ColdUser => vec![SplitKind::ColdUser],
            Protocol::ColdTrack => vec![SplitKind::ColdTrack],
            Protocol::Warm => vec![SplitKind::Warm],
        };
        let out_dir = self.path(&a.out_dir);
        let mut reports = Vec::new();
        for kind in kinds {
            let report = run_protocol(&data, tax, kind, &cfg).with_context(|| format!("{kind} protocol"))?;
            let stem = format!("{kind}_c{}", tax.size());
            for p in report.write_files(&out_dir, &stem)? {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                rec.output(&name, &p)?;
            }
            for (branch, s) in &report.summary {
                rec.metric(&format!("{stem}.{branch}.accuracy"), s.accuracy.mean);
            }
            print!("{}", report.render_text());
            reports.push(report);
        }
        if reports.len() > 1 {
            let grid = render_grid(&reports);
            let p = out_dir.join(format!("grid_c{}.txt", tax.size()));
            std::fs::write(&p, &grid)?;
            rec.output("grid", &p)?;
        }
        if a.local_global {
            let lg = local_vs_global(
                &data,
                tax,
                &LocalGlobalConfig {
                    seed: self.cli.seed,
                    test_fraction: a.test_fraction,
                    sp: cfg.sp.unwrap_or_default(),
                    ..Default::default()
                },
            )?;
            let stem = format!("local_global_c{}", tax.size());
            let (json, txt) = (out_dir.join(format!("{stem}.json")), out_dir.join(format!("{stem}.txt")));
            std::fs::write(&json, serde_json::to_vec_pretty(&lg)?)?;
            std::fs::write(&txt, lg.render_text())?;
            rec.output(&format!("{stem}.json"), &json)?;
            rec.output(&format!("{stem}.txt"), &txt)?;
            print!("{}", lg.render_text());
        }
        self.finish(rec)
    }

    fn report(&self, a: &ReportArgs) -> Result<()> {
        let mut rec = self.recorder("report", a, vec![])?;
        let mut text = String::new();
        let mut evals = Vec::new();
        for p in &a.inputs {
            let path = self.path(p);
            rec.input(&p.display().to_string(), &path);
            let raw = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            if let Ok(r) = EvalReport::from_json(&raw) {
                text.push_str(&r.render_text());
                text.push('\n');
                evals.push(r);
            } else {
                let r: LocalGlobalReport =
                    serde_json::from_str(&raw).map_err(|_| anyhow!("{} is not a report file", path.display()))?;
                text.push_str(&r.render_text());
                text.push('\n');
            }
        }
        if evals.len() > 1 {
            text.push_str(&render_grid(&evals));
        }
        print!("{text}");
        if let Some(out) = &a.out {
            let out = self.path(out);
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            rec.output("report", &out)?;
        }
        self.finish(rec)
    }

    fn build_store(&self, a: &BuildStoreArgs) -> Result<()> {
        let mut rec = self.recorder("build-store", a, vec![])?;
        let model_path = self.path(&a.model);
        let model = UamatModel::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
        let (_, streams) = self.corpus(&a.corpus)?;
        let mels = self.mels(&a.mels)?;
        let emb = self.embeddings(&a.embeddings)?;
        for (name, p) in [("model", &a.model), ("corpus", &a.corpus), ("mels", &a.mels), ("embeddings", &a.embeddings)] {
            rec.input(name, &self.path(p));
        }
        let candidates = match &a.candidates {
            Some(p) => {
                let path = self.path(p);
                rec.input("candidates", &path);
                Candidates::Pairs(read_candidates(&path)?)
            }
            None => {
                let mut tracks: Vec<TrackId> = mels.keys().cloned().collect();
                tracks.extend(streams.iter().map(|s| s.track.clone()));
                Candidates::corpus_default(tracks, &streams)
            }
        };
        let store = build_tag_store(
            &model,
            &candidates,
            StoreInputs {
                mels: &mels,
                embeddings: &emb,
                streams: &streams,
            },
        )?;
        let out = self.path(&a.out);
        store.save(&out).with_context(|| format!("writing {}", out.display()))?;
        rec.output("store", &out)?;
        rec.model("uamat", store.model_hash.clone());
        rec.model("tag_store", store.hash());
        rec.metric("pairs", store.len() as f64);
        rec.metric("skipped", store.skipped as f64);
        self.finish(rec)
    }

    fn serve(&self, a: &ServeArgs) -> Result<()> {
        let paths = SnapshotPaths {
            forest: self.path(&a.sp),
            store: self.path(&a.store),
            demographics: self.path(&a.demographics),
            embeddings: Some(self.path(&a.embeddings)),
        };
        let snapshot = Snapshot::load(&paths)?;
        if let Some(f) = a.floor {
            if !(0.0..=1.0).contains(&f) {
                bail!("--floor must be within [0, 1], got {f}");
            }
        }
        if a.k == 0 || a.k > snapshot.taxonomy().size() {
            bail!("--k must be within 1..={}, got {}", snapshot.taxonomy().size(), a.k);
        }
        let config = ServiceConfig {
            k: a.k,
            n: a.n,
            floor: a.floor,
            ..Default::default()
        };
        let state = Arc::new(AppState::new(snapshot, config));
        let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
        rt.block_on(async move {
            let addr = format!("{}:{}", a.host, a.port);
            let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            spawn_reloader(state.clone(), paths);
            sitgen_service::serve(listener, state, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
            Ok(())
        })
    }
}

/// Reloads every model file on SIGHUP and swaps the snapshot in one step.
#[cfg(unix)]
fn spawn_reloader(state: Arc<AppState>, paths: SnapshotPaths) {
    use tokio::signal::unix::{signal, SignalKind};
    tokio::spawn(async move {
        let Ok(mut hup) = signal(SignalKind::hangup()) else { return };
        while hup.recv().await.is_some() {
            let p = paths.clone();
            match tokio::task::spawn_blocking(move || Snapshot::load(&p)).await {
                Ok(Ok(next)) => {
                    let hashes = next.hashes.clone();
                    state.swap(next);
                    eprintln!("reloaded: sp {} store {}", hashes.sp, hashes.tag_store);
                }
                Ok(Err(e)) => eprintln!("reload failed, keeping the current models: {e}"),
                Err(e) => eprintln!("reload failed: {e}"),
            }
        }
    });
}

#[cfg(not(unix))]
fn spawn_reloader(_: Arc<AppState>, _: SnapshotPaths) {}

fn read_candidates(path: &Path) -> Result<Vec<(TrackId, UserId)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.with_context(|| format!("{} record {}", path.display(), i + 1))?;
        let (Some(t), Some(u)) = (rec.get(0), rec.get(1)) else {
            bail!("{} record {}: expected track,user", path.display(), i + 1);
        };
        out.push((TrackId::new(t)?, UserId::new(u)?));
    }
    Ok(out)
}
