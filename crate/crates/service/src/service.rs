//! The ghost-text service without its HTTP shell.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use rand::rngs::ChaCha8Rng;
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex as AsyncMutex;

use mac_core::api::{
    AcceptRequest, AcceptResponse, CompleteRequest, CompleteResponse, GhostText, ModelReport, RateRequest,
    RateResponse, SessionResponse, StudyReport, INTERACTIVE_TES,
};
use mac_core::dialog::{clip_prefix, DialogContext, Speaker};
use mac_core::registry::CompleterRegistry;
use mac_core::{Completer, Query};

use crate::error::{Result, ServiceError};
use crate::session::Session;
use crate::store::{Event, EventStore, Record};

/// Which model a new session talks to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Assignment {
    /// Uniformly at random over the arms.
    Random { arms: Vec<String> },
    Fixed { arm: String },
}

impl Assignment {
    pub fn arms(&self) -> Vec<&str> {
        match self {
            Assignment::Random { arms } => arms.iter().map(String::as_str).collect(),
            Assignment::Fixed { arm } => vec![arm.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Options {
    pub seed: u64,
    /// Suggestions below this confidence are not shown.
    pub threshold: f64,
    pub max_prefix_chars: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            seed: 7,
            threshold: 0.0,
            max_prefix_chars: mac_core::dialog::DEFAULT_MAX_PREFIX_CHARS,
        }
    }
}

pub struct Service {
    registry: CompleterRegistry,
    pool: Vec<DialogContext>,
    assignment: Assignment,
    options: Options,
    rng: Mutex<ChaCha8Rng>,
    sessions: RwLock<HashMap<String, Arc<AsyncMutex<Session>>>>,
    /// Arms in first-seen order, for stable reports.
    arm_order: RwLock<Vec<String>>,
    store: EventStore,
}

impl Service {
    pub fn new(
        registry: CompleterRegistry,
        pool: Vec<DialogContext>,
        assignment: Assignment,
        options: Options,
        store: EventStore,
    ) -> Result<Self> {
        let arms = assignment.arms();
        if arms.is_empty() {
            return Err(ServiceError::Config("assignment names no models".into()));
        }
        if let Some(missing) = arms.iter().find(|a| registry.get(a).is_none()) {
            return Err(ServiceError::Config(format!(
                "assigned model {missing} is not available (have {:?})",
                registry.ids()
            )));
        }
        let arm_order = arms.iter().map(|a| (*a).to_owned()).collect();
        Ok(Service {
            registry,
            pool,
            assignment,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(options.seed)),
            options,
            sessions: RwLock::new(HashMap::new()),
            arm_order: RwLock::new(arm_order),
            store,
        })
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    /// Rebuilds sessions from an earlier log. Ids already present are
    /// overwritten.
    pub fn replay(&self, records: &[Record]) -> Result<()> {
        let mut sessions: HashMap<String, Session> = HashMap::new();
        for r in records {
            match &r.event {
                Event::Started {
                    session_id,
                    arm,
                    context,
                    ..
                } => {
                    self.note_arm(arm);
                    sessions.insert(session_id.clone(), Session::new(session_id, arm, context.clone()));
                }
                other => {
                    let id = other.session_id();
                    let s = sessions
                        .get_mut(id)
                        .ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))?;
                    match other {
                        Event::Completed { typed, text, .. } => {
                            s.observe(typed)?;
                            s.offer(text);
                        }
                        Event::Accepted { n_chars, .. } => {
                            s.accept(*n_chars)?;
                        }
                        Event::Rated { rating, .. } => {
                            s.rate(i64::from(*rating))?;
                        }
                        Event::Started { .. } => unreachable!(),
                    }
                }
            }
        }
        let mut map = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        for (id, s) in sessions {
            map.insert(id, Arc::new(AsyncMutex::new(s)));
        }
        Ok(())
    }

    fn note_arm(&self, arm: &str) {
        let mut order = self.arm_order.write().unwrap_or_else(|e| e.into_inner());
        if !order.iter().any(|a| a == arm) {
            order.push(arm.to_owned());
        }
    }

    fn session(&self, id: &str) -> Result<Arc<AsyncMutex<Session>>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }

    /// The model behind a session. Never exposed over HTTP.
    pub async fn arm_of(&self, id: &str) -> Option<String> {
        let s = self.session(id).ok()?;
        let arm = s.lock().await.arm.clone();
        Some(arm)
    }

    pub fn start_session(&self) -> Result<SessionResponse> {
        if self.pool.is_empty() {
            return Err(ServiceError::EmptyPool);
        }
        let (id, arm, pool_index) = {
            let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
            let id = uuid::Builder::from_random_bytes(rng.random()).into_uuid().to_string();
            let arm = match &self.assignment {
                Assignment::Random { arms } => arms.choose(&mut *rng).expect("arms checked at startup").clone(),
                Assignment::Fixed { arm } => arm.clone(),
            };
            (id, arm, rng.random_range(0..self.pool.len()))
        };
        let context = self.pool[pool_index].clone();
        self.store.append(Event::Started {
            session_id: id.clone(),
            arm: arm.clone(),
            pool_index,
            context: context.clone(),
        })?;
        let response = SessionResponse {
            session_id: id.clone(),
            seeded_context: context.history.clone(),
            image_ref: context.image_ref.clone(),
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(AsyncMutex::new(Session::new(id, arm, context))));
        Ok(response)
    }

    pub async fn complete(&self, req: CompleteRequest) -> Result<CompleteResponse> {
        let start = Instant::now();
        let handle = self.session(&req.session_id)?;
        let mut session = handle.lock().await;
        session.observe(&req.typed)?;
        let mut model_ms = 0.0;
        let (text, confidence, served_by, degraded) = if req.typed.is_empty() {
            (String::new(), 0.0, session.arm.clone(), false)
        } else {
            let completer: Arc<dyn Completer> = Arc::clone(
                &self
                    .registry
                    .get(&session.arm)
                    .ok_or_else(|| ServiceError::Config(format!("model {} is gone", session.arm)))?
                    .completer,
            );
            let context = session.context.clone();
            let prefix = clip_prefix(&req.typed, self.options.max_prefix_chars).to_owned();
            let (s, elapsed) = tokio::task::spawn_blocking(move || {
                let t = Instant::now();
                let s = completer.complete_timed(&Query::new(&context, Speaker::User, &prefix));
                (s, t.elapsed().as_secs_f64() * 1e3)
            })
            .await
            .map_err(|e| ServiceError::Task(e.to_string()))?;
            model_ms = elapsed;
            let shown = s.triggers(self.options.threshold);
            (if shown { s.text } else { String::new() }, s.confidence, s.model_id, s.degraded)
        };
        session.offer(&text);
        let overhead_ms = (start.elapsed().as_secs_f64() * 1e3 - model_ms).max(0.0);
        self.store.append(Event::Completed {
            session_id: req.session_id,
            typed: req.typed,
            text: text.clone(),
            confidence,
            served_by,
            latency_ms: model_ms,
            overhead_ms,
            degraded,
        })?;
        Ok(CompleteResponse {
            suggestion: GhostText { text, confidence },
            latency_ms: model_ms,
        })
    }

    pub async fn accept(&self, req: AcceptRequest) -> Result<AcceptResponse> {
        let handle = self.session(&req.session_id)?;
        let mut session = handle.lock().await;
        let live_tes = session.accept(req.n_chars)?;
        self.store.append(Event::Accepted {
            session_id: req.session_id,
            n_chars: req.n_chars,
            live_tes,
        })?;
        Ok(AcceptResponse {
            live_tes,
            draft: session.draft(),
            remaining: session.outstanding(),
        })
    }

    pub async fn rate(&self, req: RateRequest) -> Result<RateResponse> {
        let handle = self.session(&req.session_id)?;
        let mut session = handle.lock().await;
        let live_tes = session.rate(req.rating)?;
        let rating = session.rating.expect("just rated");
        let final_text = session.draft();
        self.store.append(Event::Rated {
            session_id: req.session_id.clone(),
            rating,
            final_text: final_text.clone(),
            live_tes,
        })?;
        Ok(RateResponse {
            session_id: req.session_id,
            rating,
            final_text,
            live_tes,
        })
    }

    /// Mean interactive TES and rating per model over rated sessions.
    pub async fn report(&self) -> StudyReport {
        let handles: Vec<_> = self
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        let n_started = handles.len();
        let mut by_arm: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
        for h in handles {
            let s = h.lock().await;
            if let (Some(r), Some(t)) = (s.rating, s.final_tes) {
                let e = by_arm.entry(s.arm.clone()).or_default();
                e.0 += 1;
                e.1 += t.tes;
                e.2 += f64::from(r);
            }
        }
        let n_closed = by_arm.values().map(|e| e.0).sum();
        let order = self.arm_order.read().unwrap_or_else(|e| e.into_inner()).clone();
        let models = order
            .iter()
            .filter_map(|arm| {
                by_arm.get(arm).map(|&(n, tes, rating)| ModelReport {
                    model: arm.clone(),
                    n_sessions: n,
                    mean_tes: tes / n as f64,
                    mean_rating: rating / n as f64,
                })
            })
            .collect();
        StudyReport {
            tes_definition: INTERACTIVE_TES.to_owned(),
            n_started,
            n_closed,
            models,
        }
    }
}
