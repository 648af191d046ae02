//! Stage-by-stage orchestration of the detection pipeline over datasets on
//! disk.
//!
//! Output layout under the output directory:
//!
//! ```text
//! models/        pca, gmm, svm-{cnn,hog,ifv}, fusion, regressor, prior (.model)
//! <manifest>/    proposals.txt, features_cnn.txt, features_{hog,ifv}.bin,
//!                image_ifv.bin, detections*.txt, report*.txt, render/
//! logs/          one log per stage run
//! ```
//!
//! `<manifest>` is the manifest file stem, so `train.txt` and `test.txt`
//! get separate data directories.

mod render;
pub mod store;

pub use render::render_detections;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::{
    final_score, fuse_scores, score_bank, train_fusion, train_one_vs_rest, train_svm, FusionModel, LinearModel,
    SvmBank, SvmParams,
};
use crate::config::{PipelineConfig, TauPolicy};
use crate::context::{
    filter_detections, presence_scores, thresholds_from_scores, train_presence_prior, PresencePrior, PresenceSample,
};
use crate::error::{Error, Result};
use crate::eval::{categories_won, evaluate, format_report, parse_report, PerClassReport};
use crate::features::{
    dense_descriptors_plane, fisher_encode, format_cnn_features, gmm_fit, hog_plane, load_cnn_features, pca_apply,
    pca_fit, CnnFeatureTable, Channel, GmmModel, GmmParams, PcaModel, CELL_SIZE, DEFAULT_VARIANCE_FLOOR,
};
use crate::geometry::{format_detections, iou, nms_grouped, parse_detections, BBox, Detection};
use crate::image::{read_image, Image, Plane};
use crate::manifest::{load_manifest, DatasetManifest};
use crate::persist::Persist;
use crate::proposals::{format_proposals, parse_proposals, selective_search, ProposalConfig};
use crate::regress::{match_ground_truth, refine, train_bbox_regressor, BoxRegressor, RegressionSample};
use crate::synth::synth_generate;

use store::{read_matrix, write_matrix};

/// A manifest together with the name of its data directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub name: String,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest = load_manifest(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Dataset { manifest, name })
    }

    pub fn num_categories(&self) -> usize {
        self.manifest.num_categories()
    }
}

/// Per-proposal training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Object(usize),
    Background,
    Ignore,
}

/// How `detect` scores proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    Fused,
    Channel(Channel),
}

impl std::str::FromStr for Scoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Scoring::Fused),
            other => other
                .parse()
                .map(Scoring::Channel)
                .map_err(|_| Error::Invalid(format!("unknown scoring {other:?} (expected fused, cnn, hog or ifv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectOptions {
    pub scoring: Scoring,
    pub use_prior: bool,
    /// Output file stem inside the dataset directory.
    pub output: String,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            scoring: Scoring::Fused,
            use_prior: true,
            output: "detections".into(),
        }
    }
}

/// Proposals and feature rows of one dataset, aligned by proposal.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    /// Per manifest image, its proposals.
    pub boxes: Vec<Vec<BBox>>,
    /// Row index of each image's first proposal.
    pub offsets: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, image: usize) -> std::ops::Range<usize> {
        self.offsets[image]..self.offsets[image] + self.boxes[image].len()
    }
}

/// Text log written by every stage; contains no timings so reruns are
/// byte-identical.
struct StageLog {
    name: String,
    text: String,
}

impl StageLog {
    fn new(stage: &str, dataset: Option<&str>, cfg: &PipelineConfig) -> Self {
        let name = match dataset {
            Some(d) => format!("{stage}-{d}"),
            None => stage.to_string(),
        };
        let mut text = format!("stage {stage}\nconfig_hash {}\nseed {}\n", cfg.hash(), cfg.seed);
        if let Some(d) = dataset {
            let _ = writeln!(text, "dataset {d}");
        }
        log::info!("running {name}");
        StageLog { name, text }
    }

    fn line(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{key} {value}");
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

fn load_model<T: Persist>(path: PathBuf, stage: &'static str) -> Result<T> {
    T::load(&require(path, stage)?)
}

impl Pipeline {
    pub fn new(mut config: PipelineConfig, out_dir: &Path) -> Result<Pipeline> {
        config.synth.seed = config.seed;
        for sub in ["models", "logs"] {
            create_dir(&out_dir.join(sub))?;
        }
        Ok(Pipeline {
            config,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.out_dir.join("models").join(format!("{name}.model"))
    }

    pub fn data_dir(&self, ds: &Dataset) -> Result<PathBuf> {
        let dir = self.out_dir.join(&ds.name);
        create_dir(&dir)?;
        Ok(dir)
    }

    fn data_file(&self, ds: &Dataset, file: &str) -> Result<PathBuf> {
        Ok(self.data_dir(ds)?.join(file))
    }

    fn finish_log(&self, log: StageLog) -> Result<()> {
        let path = self.out_dir.join("logs").join(format!("{}.log", log.name));
        write_text(&path, &log.text)
    }

    fn svm_params(&self, offset: u64) -> SvmParams {
        SvmParams {
            lambda: self.config.svm_lambda,
            epochs: self.config.svm_epochs,
            seed: self.config.seed.wrapping_add(offset),
        }
    }

    fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            k: self.config.seg_k,
            sigma: self.config.seg_sigma,
            min_size: self.config.seg_min_size,
            max_proposals: self.config.max_proposals,
        }
    }

    // ---------------------------------------------------------------- propose

    /// Selective search on every image; writes `proposals.txt`.
    pub fn propose(&self, ds: &Dataset) -> Result<ProposalSet> {
        let mut log = StageLog::new("propose", Some(&ds.name), &self.config);
        let pcfg = self.proposal_config();
        let min_side = self.config.min_proposal_side;
        let boxes = ds
            .manifest
            .images
            .par_iter()
            .map(|e| {
                let img = read_image(&e.path)?;
                let all = selective_search(&img, &pcfg)?;
                let kept: Vec<BBox> = all
                    .iter()
                    .filter(|b| b.width() >= min_side && b.height() >= min_side)
                    .copied()
                    .collect();
                Ok(if kept.is_empty() { all[..1].to_vec() } else { kept })
            })
            .collect::<Result<Vec<_>>>()?;
        let text = format_proposals(
            ds.manifest
                .images
                .iter()
                .zip(&boxes)
                .map(|(e, b)| (e.image_id.as_str(), b.as_slice())),
        );
        write_text(&self.data_file(ds, "proposals.txt")?, &text)?;

        let set = proposal_set(boxes);
        let (hit, total) = proposal_recall(ds, &set, 0.5);
        log.line("images", ds.manifest.images.len());
        log.line("proposals", set.len());
        log.line("max_per_image", set.boxes.iter().map(Vec::len).max().unwrap_or(0));
        if total > 0 {
            log.line("recall_at_0.5", format!("{hit}/{total}"));
        }
        self.finish_log(log)?;
        Ok(set)
    }

    pub fn load_proposals(&self, ds: &Dataset) -> Result<ProposalSet> {
        let path = require(self.data_file(ds, "proposals.txt")?, "propose")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let parsed = parse_proposals(&text).map_err(|e| Error::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let ids: Vec<&str> = parsed.iter().map(|(id, _)| id.as_str()).collect();
        let expected: Vec<&str> = ds.manifest.images.iter().map(|e| e.image_id.as_str()).collect();
        if ids != expected {
            return Err(Error::Format {
                path,
                message: "proposal file does not cover the manifest images in order; rerun `propose`".into(),
            });
        }
        Ok(proposal_set(parsed.into_iter().map(|(_, b)| b).collect()))
    }

    // --------------------------------------------------------- train-codebook

    fn ifv_descriptors(&self, gray: &Plane, window: &BBox) -> Vec<Vec<f64>> {
        let side = self.config.ifv_window;
        let plane = gray.resample(window, side, side);
        dense_descriptors_plane(&plane, self.config.ifv_stride, self.config.ifv_patch)
    }

    /// Fits the PCA projection and GMM codebook of the Fisher vector channel
    /// on descriptors sampled from training proposals.
    pub fn train_codebook(&self, train: &Dataset) -> Result<(PcaModel, GmmModel)> {
        let mut log = StageLog::new("train-codebook", Some(&train.name), &self.config);
        let props = self.load_proposals(train)?;
        let n_images = train.manifest.images.len().max(1);
        let wanted = self.config.pca_samples.max(self.config.gmm_samples);
        let quota = wanted.div_ceil(n_images);
        let seed = self.config.seed;
        let per_image = train
            .manifest
            .images
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let gray = read_image(&e.path)?.to_gray();
                let descs: Vec<Vec<f64>> = props.boxes[i]
                    .iter()
                    .flat_map(|b| self.ifv_descriptors(&gray, b))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let take = quota.min(descs.len());
                let mut picks = sample(&mut rng, descs.len(), take).into_vec();
                picks.sort_unstable();
                Ok(picks.into_iter().map(|j| descs[j].clone()).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<Vec<f64>> = per_image.into_iter().flatten().collect();
        let pca_samples = &samples[..samples.len().min(self.config.pca_samples)];
        let pca = pca_fit(pca_samples, self.config.pca_dim)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(11));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(self.config.gmm_samples);
        order.sort_unstable();
        let projected = order
            .iter()
            .map(|&j| pca_apply(&pca, &samples[j]))
            .collect::<Result<Vec<_>>>()?;
        let fit = gmm_fit(
            &projected,
            &GmmParams {
                k: self.config.gmm_k,
                max_iters: self.config.gmm_iters,
                tol: self.config.gmm_tol,
                seed,
                variance_floor: DEFAULT_VARIANCE_FLOOR,
            },
        )?;
        pca.save(&self.model_path("pca"))?;
        fit.model.save(&self.model_path("gmm"))?;
        log.line("pca_samples", pca_samples.len());
        log.line("gmm_samples", projected.len());
        log.line("em_iterations", fit.log_likelihoods.len());
        if let Some(ll) = fit.log_likelihoods.last() {
            log.line("final_mean_log_likelihood", format!("{ll:.6}"));
        }
        self.finish_log(log)?;
        Ok((pca, fit.model))
    }

    // ---------------------------------------------------------------- extract

    fn cnn_embedding(&self, planes: &[Plane], window: &BBox) -> Vec<f64> {
        let g = self.config.cnn_grid;
        planes
            .iter()
            .flat_map(|p| p.resample(window, g, g).data.into_iter().map(|v| v / 255.0))
            .collect()
    }

    fn hog_feature(&self, gray: &Plane, window: &BBox) -> Vec<f64> {
        let (cx, cy) = (self.config.hog_cells_x, self.config.hog_cells_y);
        hog_plane(&gray.resample(window, cx * CELL_SIZE, cy * CELL_SIZE), cx, cy)
    }

    fn encode(&self, descs: &[Vec<f64>], pca: &PcaModel, gmm: &GmmModel) -> Result<Vec<f64>> {
        let projected = descs.iter().map(|d| pca_apply(pca, d)).collect::<Result<Vec<_>>>()?;
        match fisher_encode(&projected, gmm) {
            Ok(fv) => Ok(fv.into_inner()),
            Err(Error::ZeroFisherVector) | Err(Error::Empty(_)) => Ok(vec![0.0; (2 * gmm.dim() + 1) * gmm.k()]),
            Err(e) => Err(e),
        }
    }

    fn external_cnn_path(&self, ds: &Dataset) -> Option<PathBuf> {
        self.config
            .cnn_features
            .as_ref()
            .map(|p| PathBuf::from(p.to_string_lossy().replace("{dataset}", &ds.name)))
    }

    /// Computes the requested channels for every proposal, plus the
    /// whole-image Fisher vectors used by the presence prior when the IFV
    /// channel is requested.
    pub fn extract(&self, ds: &Dataset, channels: &[Channel]) -> Result<()> {
        let mut log = StageLog::new("extract", Some(&ds.name), &self.config);
        let props = self.load_proposals(ds)?;
        let want = |c: Channel| channels.contains(&c);
        let codebook = if want(Channel::Ifv) {
            Some((
                load_model::<PcaModel>(self.model_path("pca"), "train-codebook")?,
                load_model::<GmmModel>(self.model_path("gmm"), "train-codebook")?,
            ))
        } else {
            None
        };
        let external = self.external_cnn_path(ds);

        struct PerImage {
            cnn: Vec<Vec<f64>>,
            hog: Vec<Vec<f64>>,
            ifv: Vec<Vec<f64>>,
            image_ifv: Option<Vec<f64>>,
        }
        let per_image = ds
            .manifest
            .images
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let img = read_image(&e.path)?;
                let gray = img.to_gray();
                let planes = img.to_planes();
                let boxes = &props.boxes[i];
                let cnn = if want(Channel::Cnn) && external.is_none() {
                    boxes.iter().map(|b| self.cnn_embedding(&planes, b)).collect()
                } else {
                    Vec::new()
                };
                let hog = if want(Channel::Hog) {
                    boxes.iter().map(|b| self.hog_feature(&gray, b)).collect()
                } else {
                    Vec::new()
                };
                let (ifv, image_ifv) = match &codebook {
                    Some((pca, gmm)) => {
                        let rows = boxes
                            .iter()
                            .map(|b| self.encode(&self.ifv_descriptors(&gray, b), pca, gmm))
                            .collect::<Result<Vec<_>>>()?;
                        let whole = dense_descriptors_plane(&gray, self.config.ifv_stride, self.config.ifv_patch);
                        (rows, Some(self.encode(&whole, pca, gmm)?))
                    }
                    None => (Vec::new(), None),
                };
                Ok(PerImage { cnn, hog, ifv, image_ifv })
            })
            .collect::<Result<Vec<_>>>()?;

        if want(Channel::Cnn) {
            let out = self.data_file(ds, "features_cnn.txt")?;
            let table = match &external {
                Some(path) => {
                    let table = load_cnn_features(path)?;
                    for (e, boxes) in ds.manifest.images.iter().zip(&props.boxes) {
                        for j in 0..boxes.len() {
                            if table.get(&e.image_id, j).is_none() {
                                return Err(Error::Format {
                                    path: path.clone(),
                                    message: format!("no CNN vector for ({}, {j})", e.image_id),
                                });
                            }
                        }
                    }
                    table
                }
                None => {
                    let mut table = CnnFeatureTable::new();
                    for (e, p) in ds.manifest.images.iter().zip(&per_image) {
                        for (j, v) in p.cnn.iter().enumerate() {
                            table.insert(&e.image_id, j, v.clone())?;
                        }
                    }
                    table
                }
            };
            write_text(&out, &format_cnn_features(&table))?;
            log.line("cnn_dim", table.dim().unwrap_or(0));
        }
        if want(Channel::Hog) {
            let rows: Vec<Vec<f64>> = per_image.iter().flat_map(|p| p.hog.iter().cloned()).collect();
            write_matrix(&self.data_file(ds, "features_hog.bin")?, &rows)?;
            log.line("hog_dim", rows.first().map_or(0, Vec::len));
        }
        if want(Channel::Ifv) {
            let rows: Vec<Vec<f64>> = per_image.iter().flat_map(|p| p.ifv.iter().cloned()).collect();
            write_matrix(&self.data_file(ds, "features_ifv.bin")?, &rows)?;
            let zero = rows.iter().filter(|r| r.iter().all(|v| *v == 0.0)).count();
            let images: Vec<Vec<f64>> = per_image.into_iter().filter_map(|p| p.image_ifv).collect();
            write_matrix(&self.data_file(ds, "image_ifv.bin")?, &images)?;
            log.line("ifv_dim", rows.first().map_or(0, Vec::len));
            log.line("ifv_zero_vectors", zero);
        }
        log.line("proposals", props.len());
        self.finish_log(log)
    }

    /// Feature rows of one channel, aligned with [`Pipeline::load_proposals`].
    pub fn load_channel(&self, ds: &Dataset, props: &ProposalSet, channel: Channel) -> Result<Vec<Vec<f64>>> {
        let rows = match channel {
            Channel::Cnn => {
                let path = require(self.data_file(ds, "features_cnn.txt")?, "extract")?;
                let table = load_cnn_features(&path)?;
                let mut rows = Vec::with_capacity(props.len());
                for (e, boxes) in ds.manifest.images.iter().zip(&props.boxes) {
                    for j in 0..boxes.len() {
                        let v = table.get(&e.image_id, j).ok_or_else(|| Error::Format {
                            path: path.clone(),
                            message: format!("no CNN vector for ({}, {j}); rerun `extract`", e.image_id),
                        })?;
                        rows.push(v.to_vec());
                    }
                }
                rows
            }
            Channel::Hog => read_matrix(&require(self.data_file(ds, "features_hog.bin")?, "extract")?)?,
            Channel::Ifv => read_matrix(&require(self.data_file(ds, "features_ifv.bin")?, "extract")?)?,
        };
        if rows.len() != props.len() {
            return Err(Error::Invalid(format!(
                "{channel} features have {} rows for {} proposals; rerun `extract`",
                rows.len(),
                props.len()
            )));
        }
        Ok(rows)
    }

    pub fn load_image_features(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        let rows = read_matrix(&require(self.data_file(ds, "image_ifv.bin")?, "extract")?)?;
        if rows.len() != ds.manifest.images.len() {
            return Err(Error::Invalid("whole-image features do not match the manifest; rerun `extract`".into()));
        }
        Ok(rows)
    }

    /// Object / background / ignore label of every proposal.
    pub fn proposal_labels(&self, ds: &Dataset, props: &ProposalSet) -> Vec<Label> {
        let (pos, neg) = (self.config.svm_pos_iou, self.config.svm_neg_iou);
        let mut labels = Vec::with_capacity(props.len());
        for (e, boxes) in ds.manifest.images.iter().zip(&props.boxes) {
            for b in boxes {
                let best = e
                    .ground_truths
                    .iter()
                    .map(|g| (iou(b, &g.bbox), g.category_id))
                    .fold(None, |acc: Option<(f64, usize)>, (o, c)| match acc {
                        Some((bo, _)) if bo >= o => acc,
                        _ => Some((o, c)),
                    });
                labels.push(match best {
                    Some((o, c)) if o >= pos => Label::Object(c),
                    Some((o, _)) if o >= neg => Label::Ignore,
                    _ => Label::Background,
                });
            }
        }
        labels
    }

    // -------------------------------------------------------------- train-svm

    fn train_bank(&self, channel: Channel, features: &[&[f64]], labels: &[Option<usize>], n: usize) -> Result<SvmBank> {
        let params = self.svm_params(1);
        let f = self.config.svm_hard_negatives;
        let models = if f == 0 {
            train_one_vs_rest(features, labels, n, &params)?
        } else {
            (0..n)
                .into_par_iter()
                .map(|c| self.train_with_hard_negatives(features, labels, c, f, &params))
                .collect::<Result<Vec<_>>>()?
        };
        SvmBank::new(channel, models)
    }

    /// Trains against other-category positives plus a random background
    /// subset as large as the positive set, then adds the `f` highest-scoring
    /// remaining background samples and retrains.
    fn train_with_hard_negatives(
        &self,
        features: &[&[f64]],
        labels: &[Option<usize>],
        c: usize,
        f: usize,
        params: &SvmParams,
    ) -> Result<LinearModel> {
        let wrap = |e: Error| Error::Category {
            category: c,
            source: Box::new(e),
        };
        let positives = labels.iter().filter(|l| **l == Some(c)).count();
        let background: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(4));
        rng.set_stream(c as u64);
        let first = positives.min(background.len());
        let mut chosen: BTreeSet<usize> = sample(&mut rng, background.len(), first)
            .into_iter()
            .map(|j| background[j])
            .collect();
        let train = |chosen: &BTreeSet<usize>| {
            let idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i].is_some() || chosen.contains(&i))
                .collect();
            let x: Vec<&[f64]> = idx.iter().map(|&i| features[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| if labels[i] == Some(c) { 1.0 } else { -1.0 }).collect();
            train_svm(&x, &y, params).map_err(wrap)
        };
        let model = train(&chosen)?;
        let mut hard: Vec<(f64, usize)> = background
            .iter()
            .filter(|i| !chosen.contains(i))
            .map(|&i| (model.decision(features[i]), i))
            .collect();
        hard.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        chosen.extend(hard.iter().take(f).map(|&(_, i)| i));
        train(&chosen)
    }

    fn labelled_samples(&self, ds: &Dataset, props: &ProposalSet) -> (Vec<usize>, Vec<Option<usize>>) {
        let labels = self.proposal_labels(ds, props);
        let mut idx = Vec::new();
        let mut out = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            match l {
                Label::Object(c) => {
                    idx.push(i);
                    out.push(Some(*c));
                }
                Label::Background => {
                    idx.push(i);
                    out.push(None);
                }
                Label::Ignore => {}
            }
        }
        (idx, out)
    }

    /// One-vs-rest SVM bank per channel on labelled training proposals.
    pub fn train_svm_banks(&self, train: &Dataset) -> Result<Vec<SvmBank>> {
        let mut log = StageLog::new("train-svm", Some(&train.name), &self.config);
        let props = self.load_proposals(train)?;
        let (idx, labels) = self.labelled_samples(train, &props);
        let n = train.num_categories();
        log.line("samples", idx.len());
        log.line("background", labels.iter().filter(|l| l.is_none()).count());
        let mut banks = Vec::new();
        for channel in Channel::ALL {
            let rows = self.load_channel(train, &props, channel)?;
            let x: Vec<&[f64]> = idx.iter().map(|&i| rows[i].as_slice()).collect();
            let bank = self.train_bank(channel, &x, &labels, n)?;
            bank.save(&self.model_path(&format!("svm-{channel}")))?;
            let acc = training_accuracy(&bank, &x, &labels);
            log.line(&format!("{channel}_dim"), bank.dim());
            log.line(&format!("{channel}_train_accuracy"), format!("{acc:.6}"));
            banks.push(bank);
        }
        self.finish_log(log)?;
        Ok(banks)
    }

    pub fn load_banks(&self) -> Result<Vec<SvmBank>> {
        Channel::ALL
            .iter()
            .map(|c| load_model::<SvmBank>(self.model_path(&format!("svm-{c}")), "train-svm"))
            .collect()
    }

    // ----------------------------------------------------------- train-fusion

    /// Stacked fusion SVM. With `fusion.folds > 1` its training scores come
    /// from banks that did not see the scored image.
    pub fn train_fusion_model(&self, train: &Dataset) -> Result<FusionModel> {
        let mut log = StageLog::new("train-fusion", Some(&train.name), &self.config);
        let props = self.load_proposals(train)?;
        let (idx, labels) = self.labelled_samples(train, &props);
        let n = train.num_categories();
        let channels = Channel::ALL
            .iter()
            .map(|&c| self.load_channel(train, &props, c))
            .collect::<Result<Vec<_>>>()?;

        // image index of every proposal row
        let mut image_of = vec![0usize; props.len()];
        for i in 0..props.boxes.len() {
            for r in props.rows(i) {
                image_of[r] = i;
            }
        }
        let folds = self.config.fusion_folds;
        let mut rank = vec![0usize; train.manifest.images.len()];
        let mut by_id: Vec<usize> = (0..rank.len()).collect();
        by_id.sort_by(|&a, &b| train.manifest.images[a].image_id.cmp(&train.manifest.images[b].image_id));
        for (r, &i) in by_id.iter().enumerate() {
            rank[i] = r;
        }
        let fold_of = |row: usize| rank[image_of[row]] % folds;

        let mut scores: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); idx.len()]; 3];
        if folds == 1 {
            let banks = self.load_banks()?;
            for (ch, bank) in banks.iter().enumerate() {
                for (s, &row) in idx.iter().enumerate() {
                    scores[ch][s] = score_bank(&channels[ch][row], bank)?;
                }
            }
        } else {
            for fold in 0..folds {
                let (held, fit): (Vec<usize>, Vec<usize>) = (0..idx.len()).partition(|&s| fold_of(idx[s]) == fold);
                if held.is_empty() {
                    continue;
                }
                let fit_labels: Vec<Option<usize>> = fit.iter().map(|&s| labels[s]).collect();
                for (ch, &channel) in Channel::ALL.iter().enumerate() {
                    let x: Vec<&[f64]> = fit.iter().map(|&s| channels[ch][idx[s]].as_slice()).collect();
                    let bank = self.train_bank(channel, &x, &fit_labels, n)?;
                    for &s in &held {
                        scores[ch][s] = score_bank(&channels[ch][idx[s]], &bank)?;
                    }
                }
            }
        }
        let fused = (0..idx.len())
            .map(|s| fuse_scores(&scores[0][s], &scores[1][s], &scores[2][s]))
            .collect::<Result<Vec<_>>>()?;
        let params = SvmParams {
            lambda: self.config.fusion_lambda,
            epochs: self.config.fusion_epochs,
            seed: self.config.seed.wrapping_add(2),
        };
        let model = train_fusion(&fused, &labels, n, &params)?;
        model.save(&self.model_path("fusion"))?;
        log.line("samples", fused.len());
        log.line("folds", folds);
        log.line("input_dim", 3 * n);
        self.finish_log(log)?;
        Ok(model)
    }

    // -------------------------------------------------------- train-regressor

    pub fn train_regressor(&self, train: &Dataset) -> Result<BoxRegressor> {
        let mut log = StageLog::new("train-regressor", Some(&train.name), &self.config);
        let props = self.load_proposals(train)?;
        let rows = self.load_channel(train, &props, self.config.regress_channel)?;
        let mut samples = Vec::new();
        for (i, e) in train.manifest.images.iter().enumerate() {
            for (r, b) in props.rows(i).zip(&props.boxes[i]) {
                if let Some(g) = match_ground_truth(b, &e.ground_truths, self.config.regress_match_iou) {
                    samples.push(RegressionSample {
                        feature: &rows[r],
                        proposal: *b,
                        gt: g.bbox,
                        category_id: g.category_id,
                    });
                }
            }
        }
        let dim = rows.first().map_or(0, Vec::len);
        let reg = train_bbox_regressor(&samples, dim, train.num_categories(), self.config.regress_lambda)?;
        reg.save(&self.model_path("regressor"))?;
        log.line("channel", self.config.regress_channel);
        log.line("pairs", samples.len());
        log.line("trained_categories", reg.models.iter().filter(|m| m.is_some()).count());
        self.finish_log(log)?;
        Ok(reg)
    }

    // ------------------------------------------------------------ train-prior

    pub fn train_prior(&self, train: &Dataset) -> Result<PresencePrior> {
        let mut log = StageLog::new("train-prior", Some(&train.name), &self.config);
        let feats = self.load_image_features(train)?;
        let mut samples: Vec<PresenceSample> = train
            .manifest
            .images
            .iter()
            .zip(feats)
            .map(|(e, feature)| PresenceSample {
                image_id: e.image_id.clone(),
                feature,
                labels: e.ground_truths.iter().map(|g| g.category_id).collect(),
            })
            .collect();
        samples.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let n = train.num_categories();
        let params = SvmParams {
            lambda: self.config.prior_lambda,
            epochs: self.config.prior_epochs,
            seed: self.config.seed.wrapping_add(3),
        };
        let prior = match self.config.prior_tau {
            TauPolicy::Fixed(tau) => {
                let mut prior = train_presence_prior(&samples, n, &params)?;
                prior.set_shared_threshold(tau);
                prior
            }
            TauPolicy::Auto => {
                // thresholds from out-of-fold scores, final model on every image
                let folds = self.config.prior_folds.min(samples.len()).max(1);
                let mut scores = vec![Vec::new(); samples.len()];
                for fold in 0..folds {
                    let fit: Vec<PresenceSample> = samples
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % folds != fold)
                        .map(|(_, s)| s.clone())
                        .collect();
                    if fit.is_empty() {
                        continue;
                    }
                    let model = train_presence_prior(&fit, n, &params)?;
                    for (i, s) in samples.iter().enumerate().filter(|(i, _)| i % folds == fold) {
                        scores[i] = presence_scores(&s.feature, &model)?;
                    }
                }
                let mut prior = train_presence_prior(&samples, n, &params)?;
                let labels: Vec<&BTreeSet<usize>> = samples.iter().map(|s| &s.labels).collect();
                prior.thresholds = thresholds_from_scores(&scores, &labels, &prior.enabled, self.config.prior_recall)?;
                log.line("folds", folds);
                prior
            }
        };
        prior.save(&self.model_path("prior"))?;
        for (c, (t, on)) in prior.thresholds.iter().zip(&prior.enabled).enumerate() {
            log.line(&format!("tau_{c}"), if *on { format!("{t:.6}") } else { "disabled".into() });
        }
        self.finish_log(log)?;
        Ok(prior)
    }

    /// Presence scores of every image of `ds`, in manifest order.
    pub fn presence(&self, ds: &Dataset, prior: &PresencePrior) -> Result<Vec<Vec<f64>>> {
        self.load_image_features(ds)?
            .iter()
            .map(|f| presence_scores(f, prior))
            .collect()
    }

    // ----------------------------------------------------------------- detect

    /// Scores, refines and suppresses every proposal; applies the presence
    /// prior when requested. Returns detections in manifest order.
    pub fn detect_unfiltered(&self, ds: &Dataset, scoring: Scoring) -> Result<Vec<Vec<Detection>>> {
        let props = self.load_proposals(ds)?;
        let banks = self.load_banks()?;
        let fusion: Option<FusionModel> = match scoring {
            Scoring::Fused => Some(load_model(self.model_path("fusion"), "train-fusion")?),
            Scoring::Channel(_) => None,
        };
        let regressor: BoxRegressor = load_model(self.model_path("regressor"), "train-regressor")?;
        let channels = Channel::ALL
            .iter()
            .map(|&c| self.load_channel(ds, &props, c))
            .collect::<Result<Vec<_>>>()?;
        let reg_ch = Channel::ALL
            .iter()
            .position(|&c| c == self.config.regress_channel)
            .expect("channel is one of ALL");
        let n = ds.num_categories();
        if banks.iter().any(|b| b.num_categories() != n) {
            return Err(Error::Invalid(format!(
                "models were trained for a different category count than the {n} in this manifest"
            )));
        }

        ds.manifest
            .images
            .par_iter()
            .enumerate()
            .map(|(i, e)| {
                let mut dets = Vec::with_capacity(props.boxes[i].len() * n);
                let mut feats = Vec::with_capacity(dets.capacity());
                for (r, b) in props.rows(i).zip(&props.boxes[i]) {
                    let per_channel = banks
                        .iter()
                        .zip(&channels)
                        .map(|(bank, rows)| score_bank(&rows[r], bank))
                        .collect::<Result<Vec<_>>>()?;
                    let scores: Vec<f64> = match (&fusion, scoring) {
                        (Some(f), _) => {
                            let fused = fuse_scores(&per_channel[0], &per_channel[1], &per_channel[2])?;
                            (0..n).map(|c| final_score(&fused, f, c)).collect::<Result<_>>()?
                        }
                        (None, Scoring::Channel(ch)) => {
                            per_channel[Channel::ALL.iter().position(|&c| c == ch).expect("known channel")].clone()
                        }
                        (None, Scoring::Fused) => unreachable!("fusion model loaded for fused scoring"),
                    };
                    for (c, score) in scores.into_iter().enumerate() {
                        dets.push(Detection {
                            image_id: e.image_id.clone(),
                            bbox: *b,
                            category_id: c,
                            score,
                        });
                        feats.push(channels[reg_ch][r].as_slice());
                    }
                }
                let img = read_image(&e.path)?;
                let refined = refine(&dets, &feats, &regressor, img.width(), img.height())?;
                Ok(nms_grouped(&refined, self.config.nms_iou))
            })
            .collect()
    }

    pub fn detect(&self, ds: &Dataset, opts: &DetectOptions) -> Result<Vec<Detection>> {
        let mut log = StageLog::new(&format!("detect-{}", opts.output), Some(&ds.name), &self.config);
        let per_image = self.detect_unfiltered(ds, opts.scoring)?;
        let before: usize = per_image.iter().map(Vec::len).sum();
        let dets: Vec<Detection> = if opts.use_prior {
            let prior: PresencePrior = load_model(self.model_path("prior"), "train-prior")?;
            let presence = self.presence(ds, &prior)?;
            per_image
                .iter()
                .zip(&presence)
                .flat_map(|(d, p)| filter_detections(d, p, &prior.thresholds))
                .collect()
        } else {
            per_image.into_iter().flatten().collect()
        };
        write_text(&self.data_file(ds, &format!("{}.txt", opts.output))?, &format_detections(&dets))?;
        log.line(
            "scoring",
            match opts.scoring {
                Scoring::Fused => "fused".to_string(),
                Scoring::Channel(c) => c.to_string(),
            },
        );
        log.line("prior", opts.use_prior);
        log.line("after_nms", before);
        log.line("emitted", dets.len());
        self.finish_log(log)?;
        Ok(dets)
    }

    // ------------------------------------------------------------------- eval

    pub fn load_detections(&self, ds: &Dataset, name: &str) -> Result<Vec<Detection>> {
        let path = require(self.data_file(ds, &format!("{name}.txt"))?, "detect")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_detections(&text).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    /// Evaluates `<detections>.txt` and writes `<report>.txt`.
    pub fn eval(&self, ds: &Dataset, detections: &str, report: &str) -> Result<PerClassReport> {
        let mut log = StageLog::new(&format!("eval-{report}"), Some(&ds.name), &self.config);
        let dets = self.load_detections(ds, detections)?;
        let rep = evaluate(&dets, &ds.manifest.ground_truths(), &ds.manifest.categories, self.config.eval_iou)?;
        write_text(&self.data_file(ds, &format!("{report}.txt"))?, &format_report(&rep))?;
        log.line("detections", dets.len());
        log.line("mAP", rep.map);
        self.finish_log(log)?;
        Ok(rep)
    }

    // ----------------------------------------------------------------- render

    pub fn render(&self, ds: &Dataset, detections: &str, min_score: f64) -> Result<usize> {
        let dets = self.load_detections(ds, detections)?;
        let dir = self.data_dir(ds)?.join("render");
        create_dir(&dir)?;
        let written = ds
            .manifest
            .images
            .par_iter()
            .map(|e| {
                let img: Image = read_image(&e.path)?;
                let mine: Vec<&Detection> = dets
                    .iter()
                    .filter(|d| d.image_id == e.image_id && d.score >= min_score)
                    .collect();
                let out = render_detections(&img, &e.ground_truths, &mine);
                crate::image::write_image(&out, &dir.join(format!("{}.ppm", e.image_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(written.len())
    }
}

fn proposal_set(boxes: Vec<Vec<BBox>>) -> ProposalSet {
    let mut offsets = Vec::with_capacity(boxes.len());
    let mut acc = 0;
    for b in &boxes {
        offsets.push(acc);
        acc += b.len();
    }
    ProposalSet { boxes, offsets }
}

/// Ground truths covered by some proposal at `threshold`, and the total.
pub fn proposal_recall(ds: &Dataset, props: &ProposalSet, threshold: f64) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (e, boxes) in ds.manifest.images.iter().zip(&props.boxes) {
        for g in &e.ground_truths {
            total += 1;
            if boxes.iter().any(|b| iou(b, &g.bbox) >= threshold) {
                hit += 1;
            }
        }
    }
    (hit, total)
}

fn training_accuracy(bank: &SvmBank, x: &[&[f64]], labels: &[Option<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (xi, l) in x.iter().zip(labels) {
        for (c, m) in bank.models.iter().enumerate() {
            total += 1;
            if (m.decision(xi) > 0.0) == (*l == Some(c)) {
                correct += 1;
            }
        }
    }
    correct as f64 / total.max(1) as f64
}

/// Writes `name wins` lines for the reports.
pub fn compare_reports(named: &[(String, PathBuf)], out: &Path) -> Result<Vec<(String, usize)>> {
    let reports = named
        .iter()
        .map(|(name, path)| {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let rep = parse_report(&text).map_err(|e| Error::Format {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok((name.clone(), rep))
        })
        .collect::<Result<Vec<_>>>()?;
    let won = categories_won(&reports)?;
    let mut text = String::from("report categories_won mAP\n");
    for ((name, wins), (_, rep)) in won.iter().zip(&reports) {
        let _ = writeln!(text, "{name} {wins} {}", rep.map);
    }
    write_text(out, &text)?;
    Ok(won)
}

/// Headline numbers of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub map: f64,
    pub map_without_prior: f64,
    pub channel_maps: Vec<(Channel, f64)>,
    pub proposal_recall: f64,
    pub max_proposals: usize,
}

/// Generates the synthetic dataset under `out_dir/synth` and runs every
/// stage on it: training on `train.txt`, detection, evaluation, channel
/// ablations, comparison and rendering on `test.txt`.
pub fn run_all(config: PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    let p = Pipeline::new(config, out_dir)?;
    let synth_dir = out_dir.join("synth");
    let (train_path, test_path) = synth_generate(&p.config.synth, &synth_dir)?;
    let train = Dataset::load(&train_path)?;
    let test = Dataset::load(&test_path)?;

    p.propose(&train)?;
    let test_props = p.propose(&test)?;
    p.train_codebook(&train)?;
    p.extract(&train, &Channel::ALL)?;
    p.extract(&test, &Channel::ALL)?;
    p.train_svm_banks(&train)?;
    p.train_fusion_model(&train)?;
    p.train_regressor(&train)?;
    p.train_prior(&train)?;

    p.detect(&test, &DetectOptions::default())?;
    let fused = p.eval(&test, "detections", "report")?;
    p.detect(
        &test,
        &DetectOptions {
            scoring: Scoring::Fused,
            use_prior: false,
            output: "detections_noprior".into(),
        },
    )?;
    let noprior = p.eval(&test, "detections_noprior", "report_noprior")?;
    let mut channel_maps = Vec::new();
    let mut named = vec![("fused".to_string(), p.data_file(&test, "report.txt")?)];
    for ch in Channel::ALL {
        let name = format!("detections_{ch}");
        p.detect(
            &test,
            &DetectOptions {
                scoring: Scoring::Channel(ch),
                use_prior: true,
                output: name.clone(),
            },
        )?;
        let rep = p.eval(&test, &name, &format!("report_{ch}"))?;
        channel_maps.push((ch, rep.map));
        named.push((ch.to_string(), p.data_file(&test, &format!("report_{ch}.txt"))?));
    }
    compare_reports(&named, &p.data_file(&test, "compare.txt")?)?;
    p.render(&test, "detections", 0.0)?;

    let (hit, total) = proposal_recall(&test, &test_props, 0.5);
    Ok(RunSummary {
        map: fused.map,
        map_without_prior: noprior.map,
        channel_maps,
        proposal_recall: hit as f64 / total.max(1) as f64,
        max_proposals: test_props.boxes.iter().map(Vec::len).max().unwrap_or(0),
    })
}
