use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Every recognized key with its default. An empty default means "not set";
/// geometry keys left unset fall back to the chosen unit's own defaults.
const KEYS: &[(&str, &str)] = &[
    ("unit.kind", "energy"),
    ("unit.size", ""),
    ("unit.theta", ""),
    ("unit.frequency", ""),
    ("unit.phase", ""),
    ("unit.sigma", ""),
    ("unit.k", ""),
    ("unit.jitter", ""),
    ("unit.pool_seed", ""),
    ("unit.kernel", ""),
    ("unit.gamma", ""),
    ("unit.manifest", ""),
    ("unit.weights", ""),
    ("unit.layer", "0"),
    ("unit.channel", "0"),
    ("synthesis.n", "6"),
    ("synthesis.lambda", "0"),
    ("synthesis.alpha", "0.0005"),
    ("synthesis.prior", "smoothness"),
    ("synthesis.mode", "min"),
    ("synthesis.learning_rate", "0.1"),
    ("synthesis.max_steps", "1000"),
    ("synthesis.window", "50"),
    ("synthesis.tolerance", "1e-6"),
    ("synthesis.radius", "10"),
    ("synthesis.radius_patches", ""),
    ("synthesis.threshold", ""),
    ("synthesis.precondition", "true"),
    ("synthesis.tangent_projection", "true"),
    ("synthesis.seed", "0"),
    ("sweep.lambdas", "default"),
    ("sweep.repeats", "3"),
    ("metrics.units", "corner,texture"),
    ("metrics.stride", ""),
    ("phases.templates", ""),
    ("phases.bin_width", "15"),
    ("phases.cluster_width", "30"),
    ("tuning.units", "simple,energy,hubel-wiesel"),
    ("tuning.phases", "36"),
    ("tuning.norm", "10"),
    ("demo.units", "simple,energy,hubel-wiesel,corner"),
    ("output.display_mean", "128"),
    ("output.display_gain", "64"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Config::default();
        cfg.merge_text(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| anyhow!("line {}: unterminated section header", i + 1))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
            let key = if section.is_empty() { k.trim().to_string() } else { format!("{section}.{}", k.trim()) };
            self.set(&key, v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn set_assignment(&mut self, s: &str) -> Result<()> {
        let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("override {s:?} is not of the form section.key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| anyhow!("config key {key}: cannot parse {v:?}: {e}"))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key).split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
    }

    /// Serialized form that loads back to the same values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.values {
            let (section, name) = key.split_once('.').expect("keys are sectioned");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let mut c = Config::default();
        c.merge_text("# run\n[synthesis]\nlambda = 2  # strong\nn=4\n[unit]\nkind = corner\n").unwrap();
        assert_eq!(c.get::<f64>("synthesis.lambda").unwrap(), 2.0);
        assert_eq!(c.get::<usize>("synthesis.n").unwrap(), 4);
        assert_eq!(c.raw("unit.kind"), "corner");
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        assert!(Config::default().merge_text("[synthesis]\nlamda = 2\n").is_err());
        assert!(Config::default().merge_text("[synthesis\n").is_err());
        assert!(Config::default().merge_text("[synthesis]\nlambda\n").is_err());
        assert!(Config::default().set_assignment("synthesis.lambda").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.set("sweep.lambdas", "0,0.5").unwrap();
        c.set("unit.size", "12").unwrap();
        let mut d = Config::default();
        d.merge_text(&c.render()).unwrap();
        assert_eq!(c.values, d.values);
    }

    #[test]
    fn unset_and_lists() {
        let c = Config::default();
        assert_eq!(c.get_opt::<usize>("unit.size").unwrap(), None);
        assert_eq!(c.list("demo.units").len(), 4);
        assert!(c.get::<usize>("unit.kind").is_err());
    }
}
