//! Sweep specifications and the `name(key=value, ...)` method syntax.

use advshift::config::{parse_list, KvFile};

use crate::CliError;

/// A method tag plus per-method config overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl MethodSpec {
    /// Parses `advshift` or `advshift(r=0.1, clip=2)`. A bare item without
    /// `=` continues the previous value, so `fixed(fixed_pi=0.2,0.8)` works.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = text.trim();
        let (name, args) = match text.split_once('(') {
            None => (text, ""),
            Some((name, rest)) => {
                let args = rest
                    .strip_suffix(')')
                    .ok_or_else(|| CliError::Input(format!("unclosed `(` in method `{text}`")))?;
                (name.trim(), args)
            }
        };
        if name.is_empty() {
            return Err(CliError::Input("empty method name".into()));
        }
        let mut overrides: Vec<(String, String)> = vec![("method".into(), name.to_string())];
        for item in args.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item.split_once('=') {
                Some((k, v)) => overrides.push((k.trim().to_string(), v.trim().to_string())),
                None if overrides.len() > 1 => {
                    let last = overrides.last_mut().expect("non-empty");
                    last.1.push(',');
                    last.1.push_str(item);
                }
                None => return Err(CliError::Input(format!("expected key=value in method `{text}`, got `{item}`"))),
            }
        }
        Ok(Self { label: text.to_string(), overrides })
    }

    pub fn apply(&self, kv: &mut KvFile) {
        for (k, v) in &self.overrides {
            kv.insert(k, v);
        }
    }
}

/// One varied config key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub methods: Vec<MethodSpec>,
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    pub taus: Vec<f64>,
}

pub const SWEEP_KEYS: &[&str] = &["methods", "seeds", "taus", "r", "clip", "epsilon"];

impl SweepSpec {
    /// Keys: `methods` (`;`-separated), `seeds`, `taus`, and optional
    /// comma lists for `r`, `clip`, `epsilon`.
    pub fn from_kv(kv: &KvFile) -> Result<Self, CliError> {
        kv.check_keys(SWEEP_KEYS)?;
        let methods = kv
            .get("methods")
            .ok_or_else(|| CliError::Input("sweep spec needs key `methods`".into()))?
            .split(';')
            .map(MethodSpec::parse)
            .collect::<Result<Vec<_>, _>>()?;
        let seeds = parse_list("seeds", kv.get("seeds").unwrap_or("0"))?;
        let taus = parse_taus(kv.get("taus").unwrap_or("0,0.5,1,2"))?;
        let mut axes = Vec::new();
        for key in ["r", "clip", "epsilon"] {
            if let Some(raw) = kv.get(key) {
                let values: Vec<f64> = parse_list(key, raw)?;
                axes.push(Axis { key: key.into(), values: values.iter().map(|v| v.to_string()).collect() });
            }
        }
        Ok(Self { methods, axes, seeds, taus })
    }

    /// Every (method, axis values, seed) combination, in row-major order.
    pub fn jobs(&self) -> Vec<Job> {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for axis in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut jobs = Vec::new();
        for method in &self.methods {
            for combo in &combos {
                for &seed in &self.seeds {
                    jobs.push(Job { method: method.clone(), settings: combo.clone(), seed });
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub method: MethodSpec,
    pub settings: Vec<(String, String)>,
    pub seed: u64,
}

impl Job {
    /// Base config, then the method's overrides, then the axis values.
    pub fn config(&self, base: &KvFile) -> KvFile {
        let mut kv = base.clone();
        self.method.apply(&mut kv);
        for (k, v) in &self.settings {
            kv.insert(k, v);
        }
        kv.insert("seed", &self.seed.to_string());
        kv
    }
}

pub fn parse_taus(text: &str) -> Result<Vec<f64>, CliError> {
    let taus: Vec<f64> = parse_list("taus", text)?;
    if taus.is_empty() || taus.iter().any(|t| !(*t >= 0.0)) {
        return Err(CliError::Input(format!("taus must be non-negative numbers, got `{text}`")));
    }
    Ok(taus)
}
