use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{usage, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "SEEDENC_OUTPUT_ROOT";
const DEFAULT_ROOT: &str = "runs";

/// A subcommand with its optional config file, output directory and
/// `--key value` overrides, in command-line order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Invocation {
    pub command: String,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
}

pub fn parse_invocation(args: &[String]) -> CliResult<Invocation> {
    let Some((command, rest)) = args.split_first() else {
        return Err(usage("missing subcommand"));
    };
    let mut inv = Invocation {
        command: command.clone(),
        ..Invocation::default()
    };
    let mut it = rest.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(usage(format!("unexpected argument {arg:?}; settings are given as --key value")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => inv.config = Some(PathBuf::from(value)),
            "out" => inv.out = Some(PathBuf::from(value)),
            _ => inv.overrides.push((key.replace('-', "_"), value)),
        }
    }
    Ok(inv)
}

/// Parses a command-line value as a TOML literal, falling back to a string.
fn literal(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(text.to_string())),
        Err(_) => Value::String(text.to_string()),
    }
}

fn leaf_paths(table: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaf_paths(t, &path, out),
            _ => out.push(path),
        }
    }
}

fn resolve_key(table: &Table, key: &str, aliases: &[(&str, &str)]) -> CliResult<String> {
    let mut leaves = Vec::new();
    leaf_paths(table, "", &mut leaves);
    if leaves.iter().any(|l| l == key) {
        return Ok(key.to_string());
    }
    if let Some((_, path)) = aliases.iter().find(|(a, _)| *a == key) {
        return Ok(path.to_string());
    }
    let matches: Vec<&String> = leaves.iter().filter(|l| l.rsplit('.').next() == Some(key)).collect();
    match matches.as_slice() {
        [one] => Ok((*one).clone()),
        [] => Err(usage(format!("unknown config key {key:?}"))),
        many => Err(usage(format!(
            "config key {key:?} is ambiguous; use one of {}",
            many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(usage(format!("unknown config key {path:?}"))),
        };
    }
    match cur.get_mut(last) {
        Some(slot) if !matches!(slot, Value::Table(_)) => {
            // `--checkpoints a.ckpt` means a one-element list.
            *slot = match (&*slot, value) {
                (Value::Array(_), v @ Value::Array(_)) => v,
                (Value::Array(_), v) => Value::Array(vec![v]),
                (_, v) => v,
            };
            Ok(())
        }
        _ => Err(usage(format!("unknown config key {path:?}"))),
    }
}

/// Overlays `src` onto `dst`; keys absent from `dst` are rejected.
fn merge(dst: &mut Table, src: Table, prefix: &str) -> CliResult<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(usage(format!("unknown config key {path:?}"))),
        }
    }
    Ok(())
}

fn to_table<T: Serialize>(value: &T) -> CliResult<Table> {
    Table::try_from(value).map_err(|e| usage(format!("cannot represent config: {e}")))
}

/// Defaults, overlaid with the config file, overlaid with overrides.
pub fn resolve<T>(inv: &Invocation, aliases: &[(&str, &str)]) -> CliResult<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut table = to_table(&T::default())?;
    if let Some(path) = &inv.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Table = text
            .parse()
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        merge(&mut table, file, "")?;
    }
    for (key, raw) in &inv.overrides {
        let path = resolve_key(&table, key, aliases)?;
        set_path(&mut table, &path, literal(raw))?;
    }
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("invalid config: {}", e.message())))
}

pub fn config_text<T: Serialize>(cfg: &T) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| usage(format!("cannot serialize config: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Output directory of one invocation.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `--out` if given, otherwise `<root>/<command>-<config hash>` with the
    /// root from the environment.
    pub fn create(inv: &Invocation, config_text: &str) -> CliResult<RunDir> {
        let path = match &inv.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_ROOT), PathBuf::from);
                root.join(format!("{}-{}", inv.command, &sha256_hex(config_text.as_bytes())[..12]))
            }
        };
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("config.toml"), config_text)?;
        Ok(RunDir { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records the command, seed, config hash and a content hash of every
    /// input file.
    pub fn write_manifest(
        &self,
        command: &str,
        config_text: &str,
        seed: Option<u64>,
        inputs: &[&Path],
        notes: &[(&str, String)],
    ) -> CliResult<()> {
        let mut t = Table::new();
        t.insert("command".into(), Value::String(command.into()));
        t.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        t.insert("config_sha256".into(), Value::String(sha256_hex(config_text.as_bytes())));
        if let Some(s) = seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(p.display().to_string(), Value::String(hash_file(p)?));
        }
        t.insert("inputs".into(), Value::Table(hashes.into_iter().collect()));
        let notes: Table = notes.iter().map(|(k, v)| (k.to_string(), Value::String(v.clone()))).collect();
        if !notes.is_empty() {
            t.insert("notes".into(), Value::Table(notes));
        }
        std::fs::write(self.join("manifest.toml"), toml::to_string(&t).map_err(|e| usage(e.to_string()))?)?;
        Ok(())
    }
}

pub fn require_path(field: &str, value: &str) -> CliResult<PathBuf> {
    if value.is_empty() {
        Err(usage(format!("missing required setting {field:?}")))
    } else {
        Ok(PathBuf::from(value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        seed: u64,
        rate: f64,
        name: String,
    }

    impl Default for Inner {
        fn default() -> Self {
            Inner {
                seed: 0,
                rate: 0.5,
                name: "x".into(),
            }
        }
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize, Default)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        a: Inner,
        list: Vec<usize>,
    }

    fn inv(args: &[&str]) -> Invocation {
        parse_invocation(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn overrides_resolve_by_path_alias_and_leaf() {
        let i = inv(&["cmd", "--seed", "3", "--a.rate=0.25", "--list", "[1, 2]", "--out", "o"]);
        assert_eq!(i.out, Some(PathBuf::from("o")));
        let o: Outer = resolve(&i, &[]).unwrap();
        assert_eq!(o.a.seed, 3);
        assert_eq!(o.a.rate, 0.25);
        assert_eq!(o.list, [1, 2]);
        let o: Outer = resolve(&inv(&["cmd", "--list", "7"]), &[]).unwrap();
        assert_eq!(o.list, [7]);
        let o: Outer = resolve(&inv(&["cmd", "--label", "runs/a b"]), &[("label", "a.name")]).unwrap();
        assert_eq!(o.a.name, "runs/a b");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_usage_errors() {
        let e = resolve::<Outer>(&inv(&["cmd", "--bogus", "1"]), &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"));
        assert_eq!(e.exit_code(), crate::error::EXIT_USAGE);
        assert!(resolve::<Outer>(&inv(&["cmd", "--seed", "abc"]), &[]).is_err());
        assert!(parse_invocation(&["cmd".into(), "--seed".into()]).is_err());
        assert!(parse_invocation(&["cmd".into(), "positional".into()]).is_err());
    }

    #[test]
    fn config_files_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[a]\nseed = 9\n").unwrap();
        let mut i = inv(&["cmd", "--rate", "1.5"]);
        i.config = Some(p.clone());
        let o: Outer = resolve(&i, &[]).unwrap();
        assert_eq!((o.a.seed, o.a.rate), (9, 1.5));
        std::fs::write(&p, "[a]\nsede = 9\n").unwrap();
        let e = resolve::<Outer>(&i, &[]).unwrap_err();
        assert!(e.to_string().contains("a.sede"));
    }
}
