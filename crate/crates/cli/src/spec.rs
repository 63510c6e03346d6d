//! Experiment specification: a JSON document (or flags) normalized into a
//! fully explicit form that is echoed into every manifest.

use serde::{Deserialize, Serialize};

use annihilate_core::coupling::couple_initial;
use annihilate_core::{Error, InitialLaw, ReflectiveGraph, Result, SimParams};

pub const MODES: &[&str] = &[
    "plain",
    "coupled-equal",
    "coupled-general",
    "entangled",
    "recurrence",
    "escape",
    "oracle-check",
    "truncation",
];

/// On-disk experiment spec. Unknown keys are hard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub graph: String,
    pub nu: String,
    pub da: f64,
    pub db: f64,
    pub tmax: f64,
    pub mode: String,
    pub replicas: u32,
    pub seed: u64,
    /// Discrepancy density for coupled modes. When absent it defaults to the
    /// schedule delta^2 / (K * tmax).
    #[serde(default)]
    pub m: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub n: Option<i64>,
    #[serde(default)]
    pub k: Option<u32>,
    /// Site observed by recurrence mode (dense index).
    #[serde(default)]
    pub site: Option<u32>,
    /// Time ladder for recurrence/escape modes.
    #[serde(default)]
    pub ladder: Option<Vec<f64>>,
    /// Fit window for plain mode (log-log slope of the density curve).
    #[serde(default)]
    pub fit_window: Option<(f64, f64)>,
    #[serde(default)]
    pub bootstrap: Option<u32>,
    /// Walk rate for escape mode.
    #[serde(default)]
    pub rate: Option<f64>,
    /// Truncation radii ladder.
    #[serde(default)]
    pub radii: Option<Vec<u64>>,
    /// Path length cap for oracle-check entanglement enumeration.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Record event logs as JSONL (small runs only).
    #[serde(default)]
    pub events: Option<bool>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            graph: "torus:d=1,L=1024,kernel=nn".into(),
            nu: "1:0.25,-1:0.25,0:0.5".into(),
            da: 1.0,
            db: 1.0,
            tmax: 100.0,
            mode: "plain".into(),
            replicas: 8,
            seed: 1,
            m: None,
            delta: None,
            n: None,
            k: None,
            site: None,
            ladder: None,
            fit_window: None,
            bootstrap: None,
            rate: None,
            radii: None,
            max_steps: None,
            events: None,
        }
    }
}

pub struct Normalized {
    pub spec: ExperimentSpec,
    pub graph: ReflectiveGraph,
    pub nu: InitialLaw,
    pub params: SimParams,
}

impl ExperimentSpec {
    /// Check every downstream precondition up front, filling defaults so the
    /// echoed spec is fully explicit. Diagnostics are aggregated.
    pub fn normalize(mut self) -> Result<Normalized> {
        let mut diags: Vec<String> = Vec::new();

        if !MODES.contains(&self.mode.as_str()) {
            diags.push(format!(
                "unknown mode `{}` (expected one of {})",
                self.mode,
                MODES.join(", ")
            ));
        }
        let graph = match ReflectiveGraph::parse(&self.graph) {
            Ok(g) => Some(g),
            Err(e) => {
                diags.push(e.to_string());
                None
            }
        };
        let nu = match InitialLaw::parse(&self.nu) {
            Ok(nu) => Some(nu),
            Err(e) => {
                diags.push(e.to_string());
                None
            }
        };
        let params = SimParams {
            d_a: self.da,
            d_b: self.db,
            t_max: self.tmax,
        };
        if let Err(e) = params.validate() {
            diags.push(e.to_string());
        }
        if self.replicas == 0 {
            diags.push("replicas must be at least 1".into());
        }

        let coupled = self.mode.starts_with("coupled");
        if coupled {
            self.n = Some(self.n.unwrap_or(0));
            self.k = Some(self.k.unwrap_or(1));
            self.delta = Some(self.delta.unwrap_or(0.25));
            if self.m.is_none() {
                // The schedule m = delta^2 / (K t).
                let d = self.delta.unwrap();
                self.m = Some(d * d / (self.k.unwrap() as f64 * self.tmax));
            }
            if let (Some(g), Some(nu)) = (&graph, &nu) {
                if let Err(e) = couple_initial(
                    g,
                    nu,
                    self.m.unwrap(),
                    self.n.unwrap(),
                    self.k.unwrap(),
                    self.seed,
                ) {
                    diags.push(e.to_string());
                }
            }
            if self.mode == "coupled-equal" && self.da != self.db {
                diags.push(format!(
                    "coupled-equal requires D_A = D_B (got {} and {}); use coupled-general",
                    self.da, self.db
                ));
            }
            if self.mode == "coupled-general" && self.db > self.da {
                diags.push("coupled-general requires D_B <= D_A".into());
            }
        }
        if self.mode == "recurrence" {
            self.site = Some(self.site.unwrap_or(0));
            self.ladder = Some(self.ladder.unwrap_or_else(|| vec![100.0, 1000.0]));
        }
        if self.mode == "escape" {
            self.rate = Some(self.rate.unwrap_or(1.0));
            self.ladder = Some(self.ladder.unwrap_or_else(|| vec![self.tmax]));
        }
        if self.mode == "truncation" {
            self.radii = Some(self.radii.unwrap_or_else(|| vec![8, 16, 24]));
        }
        if self.mode == "oracle-check" {
            self.max_steps = Some(self.max_steps.unwrap_or(3).min(5));
        }
        if self.mode == "plain" {
            self.bootstrap = Some(self.bootstrap.unwrap_or(400));
        }
        if let Some(l) = &self.ladder {
            if l.is_empty() || l.windows(2).any(|w| w[0] >= w[1]) {
                diags.push("ladder must be a strictly increasing list".into());
            }
        }
        self.events = Some(self.events.unwrap_or(false));

        if !diags.is_empty() {
            return Err(Error::InvalidSpec(diags.join("; ")));
        }
        Ok(Normalized {
            spec: self,
            graph: graph.unwrap(),
            nu: nu.unwrap(),
            params,
        })
    }
}
