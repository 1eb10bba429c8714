//! Axum service over `scfam-core`. Short operations answer inline (on the
//! blocking pool); training and ablation run as background jobs polled at
//! `GET /jobs/{id}`.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;

use scfam_api::*;
use scfam_core::divergence::{estimate_classwise, estimate_mch, estimate_set, DomainFeatureSet};
use scfam_core::harness::{parse_runs, render_report, run_ablation, run_experiment, AblationGrid, ExperimentConfig, TrainHooks};
use scfam_core::labels::{label_scene, label_semantic_vector, LabelingConfig};
use scfam_core::rf::ConvStackSpec;
use scfam_core::synth::{generate_dataset, write_dataset};
use scfam_core::Error as CoreError;

pub const OUT_ROOT_ENV: &str = "SCFAM_OUT";
pub const ADDR_ENV: &str = "SCFAM_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    out_root: PathBuf,
    next_id: AtomicU64,
    jobs: Mutex<BTreeMap<u64, JobStatus>>,
}

impl AppState {
    pub fn new(out_root: impl Into<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                out_root: out_root.into(),
                next_id: AtomicU64::new(1),
                jobs: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    pub fn out_root(&self) -> &Path {
        &self.inner.out_root
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.inner.jobs.lock().expect("jobs lock").get_mut(&id) {
            f(j);
        }
    }

    fn start_job(&self, kind: JobKind, total: usize) -> u64 {
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner.jobs.lock().expect("jobs lock").insert(
            id,
            JobStatus {
                id,
                kind,
                state: JobState::Running,
                done: 0,
                total,
                result: None,
                error: None,
            },
        );
        id
    }
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::Io { .. } | CoreError::Image(_) | CoreError::Csv(_) | CoreError::Diverged { .. } | CoreError::NonFinite { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker panicked: {e}")))?
}

/// A relative path with no `..`, resolved under `root`.
fn under_root(root: &Path, rel: &str) -> Result<PathBuf, ApiError> {
    let p = Path::new(rel);
    if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError::bad(format!("`{rel}` must be a relative path without `..`")));
    }
    Ok(root.join(p))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn rf(Json(req): Json<RfRequest>) -> ApiResult<RfResponse> {
    let stack = ConvStackSpec::new(req.layers)?;
    let image = (req.image[0], req.image[1]);
    let size = stack.receptive_field_size(req.layer)?;
    let (rows, cols) = stack.grid_size(req.layer, image)?;
    let positions = req
        .positions
        .unwrap_or_else(|| (0..rows).flat_map(|u| (0..cols).map(move |v| [u, v])).collect());
    let fields = positions
        .into_iter()
        .map(|[u, v]| {
            Ok(FieldAt {
                u,
                v,
                rect: stack.project_field(req.layer, u, v, image)?,
            })
        })
        .collect::<Result<_, CoreError>>()?;
    Ok(Json(RfResponse {
        receptive_field_size: size,
        jump: stack.jump(req.layer),
        grid: [rows, cols],
        fields,
    }))
}

async fn label(Json(req): Json<LabelRequest>) -> ApiResult<LabelResponse> {
    let cfg = LabelingConfig::new(req.zeta, req.num_classes)?;
    match (req.field, req.scene) {
        (Some(field), None) => Ok(Json(LabelResponse {
            vector: Some(label_semantic_vector(&req.boxes, cfg.num_classes, cfg.zeta, &field)?),
            maps: None,
        })),
        (None, Some(scene)) => {
            let stack = ConvStackSpec::new(scene.layers)?;
            let maps = label_scene(&req.boxes, (scene.image[0], scene.image[1]), &stack, &scene.taps, &cfg)?;
            Ok(Json(LabelResponse {
                vector: None,
                maps: Some(maps),
            }))
        }
        _ => Err(ApiError::bad("give exactly one of `field` or `scene`")),
    }
}

async fn divergence(Json(req): Json<DivergenceRequest>) -> ApiResult<DivergenceResponse> {
    blocking(move || {
        req.trainer.validate()?;
        let set = DomainFeatureSet::new(req.samples)?;
        let resp = match req.mode {
            DivergenceMode::Pooled => DivergenceResponse {
                report: None,
                csv: None,
                pooled: Some(estimate_set(&set, &req.trainer)?),
            },
            mode => {
                let report = if mode == DivergenceMode::Mch { estimate_mch(&set, &req.trainer)? } else { estimate_classwise(&set, &req.trainer)? };
                let mut csv = Vec::new();
                report.write_csv(&mut csv)?;
                DivergenceResponse {
                    csv: Some(String::from_utf8(csv).expect("csv is utf-8")),
                    report: Some(report),
                    pooled: None,
                }
            }
        };
        Ok(Json(resp))
    })
    .await
}

async fn synth(State(st): State<AppState>, Json(req): Json<SynthRequest>) -> ApiResult<SynthResponse> {
    let dir = under_root(st.out_root(), &req.dir)?;
    blocking(move || {
        req.config.scene.validate()?;
        req.config.shift.validate()?;
        let ds = generate_dataset(&req.config)?;
        write_dataset(&ds, &dir)?;
        let counts = [
            ("source_train", ds.source_train.len()),
            ("target_train", ds.target_train.len()),
            ("source_val", ds.source_val.len()),
            ("target_val", ds.target_val.len()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Ok(Json(SynthResponse { dir, counts }))
    })
    .await
}

fn run_name(name: &str, id: u64) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{clean}-{id}")
}

/// Resolves a relative `data.dir` against the output root, where `synth`
/// writes.
fn resolve_data_dir(cfg: &mut ExperimentConfig, root: &Path) {
    if let Some(d) = &cfg.data.dir {
        if d.is_relative() {
            cfg.data.dir = Some(root.join(d));
        }
    }
}

async fn train(State(st): State<AppState>, Json(req): Json<TrainRequest>) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    let mut cfg = ExperimentConfig::from_toml(&req.config_toml)?;
    resolve_data_dir(&mut cfg, st.out_root());
    let id = st.start_job(JobKind::Train, cfg.optimizer.total_iterations());
    let dir = st.out_root().join("runs").join(run_name(&cfg.name, id));
    let state = st.clone();
    tokio::task::spawn_blocking(move || {
        let progress = |done: usize, _total: usize| state.update(id, |j| j.done = done);
        let res = scfam_core::harness::load_data(&cfg).and_then(|(data, eval)| {
            let hooks = TrainHooks {
                snapshot_dir: None,
                progress: Some(&progress),
            };
            run_experiment(&cfg, &data, &eval, &dir, &hooks)
        });
        finish(&state, id, res.and_then(|(out, files)| {
            Ok(JobResult::Train(TrainResult {
                dir: files.dir,
                metrics_csv: scfam_core::harness::metrics::metrics_csv_string(&out.history)?,
                last: out.history.last().cloned(),
            }))
        }));
    });
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { id })))
}

async fn ablate(State(st): State<AppState>, Json(req): Json<AblateRequest>) -> Result<(StatusCode, Json<JobAccepted>), ApiError> {
    let mut cfg = ExperimentConfig::from_toml(&req.config_toml)?;
    resolve_data_dir(&mut cfg, st.out_root());
    let grid = AblationGrid::from_toml(&req.grid_toml)?;
    let cells = grid.expand(&cfg)?.len();
    let id = st.start_job(JobKind::Ablate, cells);
    let dir = st.out_root().join("ablations").join(run_name(&cfg.name, id));
    let state = st.clone();
    tokio::task::spawn_blocking(move || {
        let res = run_ablation(&cfg, &grid, Some(&dir)).and_then(|(rep, _)| {
            Ok(JobResult::Ablate(AblateResult {
                dir: dir.clone(),
                table_csv: rep.csv_string()?,
                all_ok: rep.all_ok(),
                rows: rep.rows,
            }))
        });
        if res.is_ok() {
            state.update(id, |j| j.done = cells);
        }
        finish(&state, id, res);
    });
    Ok((StatusCode::ACCEPTED, Json(JobAccepted { id })))
}

fn finish(st: &AppState, id: u64, res: scfam_core::Result<JobResult>) {
    match res {
        Ok(r) => {
            tracing::info!(job = id, "job succeeded");
            st.update(id, |j| {
                j.state = JobState::Succeeded;
                j.result = Some(r);
            })
        }
        Err(e) => {
            tracing::warn!(job = id, error = %e, "job failed");
            st.update(id, |j| {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            })
        }
    }
}

async fn report(Json(req): Json<ReportRequest>) -> ApiResult<ReportResponse> {
    blocking(move || {
        let files: Vec<(String, String)> = req.runs.into_iter().map(|r| (r.name, r.csv)).collect();
        let runs = parse_runs(&files)?;
        let bytes = render_report(&runs)?;
        let b64 = base64::engine::general_purpose::STANDARD;
        Ok(Json(ReportResponse {
            metrics_csv: bytes.metrics_csv,
            loss_png: b64.encode(&bytes.loss_png),
            divergence_png: b64.encode(&bytes.divergence_png),
        }))
    })
    .await
}

async fn job(State(st): State<AppState>, UrlPath(id): UrlPath<u64>) -> ApiResult<JobStatus> {
    st.inner
        .jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id}")))
}

async fn jobs(State(st): State<AppState>) -> Json<Vec<JobStatus>> {
    Json(st.inner.jobs.lock().expect("jobs lock").values().cloned().collect())
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/rf", post(rf))
        .route("/label", post(label))
        .route("/divergence", post(divergence))
        .route("/synth", post(synth))
        .route("/train", post(train))
        .route("/ablate", post(ablate))
        .route("/report", post(report))
        .route("/jobs", get(jobs))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

/// Serves on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> anyhow::Result<()> {
    axum::serve(listener, app(state)).await?;
    Ok(())
}
