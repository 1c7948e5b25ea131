//! The output directory: atomic writes, the lock file, the manifest and the
//! metrics stream.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nmt_adapt_core::corpus::{
    format_monolingual, format_parallel_tsv, parse_monolingual, parse_parallel_tsv, LanguageTag, MonolingualCorpus,
    ParallelCorpus, Sentence, Vocabulary,
};
use nmt_adapt_core::metrics::MetricsRecord;
use nmt_adapt_core::synthlang::{DatasetBundle, EN, HRL, LRL};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const LOCK: &str = "run.lock";
pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

/// Held for the lifetime of a command; removed on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("{} exists: another command is using this directory (remove it if that run died)", path.display())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Index of everything a run produced. Holds no timestamps or absolute
/// paths, so identical runs give identical manifests.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub artifacts: BTreeMap<String, Artifact>,
    /// Digest of the metric stream with wall-clock fields removed.
    pub metrics_sha256: String,
}

/// A run's output directory.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
    quiet: bool,
}

impl RunDir {
    /// Opens `root`, loading an existing manifest if there is one.
    pub fn open(root: &Path, seed: u64, config_toml: &str, quiet: bool) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join(MANIFEST);
        let mut manifest = if path.exists() {
            let text = fs::read_to_string(&path)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            Manifest {
                format: 1,
                ..Manifest::default()
            }
        };
        manifest.seed = seed;
        manifest.config_sha256 = sha256_hex(config_toml.as_bytes());
        let dir = Self {
            root: root.to_path_buf(),
            manifest,
            quiet,
        };
        write_atomic(&dir.root.join(EFFECTIVE_CONFIG), config_toml.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.artifacts.get(name).is_some_and(|a| self.path(&a.path).exists())
    }

    /// Writes an artifact and registers it under `name`.
    pub fn put(&mut self, name: &str, rel: &str, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&self.path(rel), bytes)?;
        self.manifest.artifacts.insert(
            name.to_string(),
            Artifact {
                path: rel.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        self.save()
    }

    /// Reads a registered artifact after checking its hash.
    pub fn get(&self, name: &str) -> anyhow::Result<Vec<u8>> {
        let a = self.manifest.artifacts.get(name).ok_or_else(|| crate::Missing(name.to_string()))?;
        let bytes = fs::read(self.path(&a.path)).map_err(|_| crate::Missing(name.to_string()))?;
        if sha256_hex(&bytes) != a.sha256 {
            bail!("{} does not match its manifest hash", a.path);
        }
        Ok(bytes)
    }

    pub fn get_text(&self, name: &str) -> anyhow::Result<String> {
        String::from_utf8(self.get(name)?).with_context(|| format!("{name} is not UTF-8"))
    }

    /// Every registered artifact exists and matches its hash.
    pub fn verify(&self) -> anyhow::Result<()> {
        for name in self.manifest.artifacts.keys() {
            self.get(name)?;
        }
        Ok(())
    }

    pub fn save(&mut self) -> anyhow::Result<()> {
        self.manifest.metrics_sha256 = self.metrics_digest()?;
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }

    /// Appends records to the metrics stream, one JSON object per line.
    pub fn log(&mut self, records: &[MetricsRecord]) -> anyhow::Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut out = String::new();
        for r in records {
            let line = MetricLine {
                run: r.run.clone(),
                step: r.step,
                metrics: r.values.iter().cloned().collect(),
                wall_time: Some(wall),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
            if !self.quiet && (r.get("bleu.dev").is_some() || r.get("bleu.test").is_some() || r.get("bleu").is_some()) {
                log::info!("{} step {}: {:?}", r.run, r.step, r.values);
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(METRICS))?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_metrics(&self) -> anyhow::Result<Vec<MetricLine>> {
        let path = self.path(METRICS);
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(&path)?
            .lines()
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", METRICS, i + 1)))
            .collect()
    }

    fn metrics_digest(&self) -> anyhow::Result<String> {
        let mut h = Sha256::new();
        for mut line in self.read_metrics()? {
            line.wall_time = None;
            h.update(serde_json::to_string(&line)?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub run: String,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

fn format_languages(langs: &[LanguageTag]) -> String {
    langs
        .iter()
        .map(|l| format!("{}\t{}\t{}\n", l.id, l.script_class, l.alphabet.iter().collect::<String>()))
        .collect()
}

fn parse_languages(text: &str) -> anyhow::Result<Vec<LanguageTag>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, class, alphabet] = cols[..] else {
                bail!("languages.tsv:{}: expected id, class and alphabet", i + 1)
            };
            Ok(LanguageTag::new(id, alphabet.chars(), class)?)
        })
        .collect()
}

/// Corpus files of a bundle under `prefix` (`data` or `prepared`).
const CORPORA: [&str; 7] = ["languages", "en_hrl", "mono_en", "mono_hrl", "mono_lrl", "dev", "test"];

fn corpus_file(name: &str) -> String {
    match name {
        "languages" | "en_hrl" | "dev" | "test" => format!("{name}.tsv"),
        _ => format!("{name}.txt"),
    }
}

pub fn put_bundle(dir: &mut RunDir, prefix: &str, b: &DatasetBundle) -> anyhow::Result<()> {
    for name in CORPORA {
        let text = match name {
            "languages" => format_languages(&b.languages),
            "en_hrl" => format_parallel_tsv(&b.en_hrl.pairs)?,
            "mono_en" => format_monolingual(&b.mono_en.sentences),
            "mono_hrl" => format_monolingual(&b.mono_hrl.sentences),
            "mono_lrl" => format_monolingual(&b.mono_lrl.sentences),
            "dev" => format_parallel_tsv(&b.dev_en_lrl.pairs)?,
            _ => format_parallel_tsv(&b.test_en_lrl.pairs)?,
        };
        dir.put(&format!("{prefix}/{name}"), &format!("{prefix}/{}", corpus_file(name)), text.as_bytes())?;
    }
    Ok(())
}

pub fn has_bundle(dir: &RunDir, prefix: &str) -> bool {
    CORPORA.iter().all(|n| dir.has(&format!("{prefix}/{n}")))
}

pub fn get_bundle(dir: &RunDir, prefix: &str) -> anyhow::Result<DatasetBundle> {
    let text = |n: &str| dir.get_text(&format!("{prefix}/{n}"));
    let langs = parse_languages(&text("languages")?)?;
    let languages: [LanguageTag; 3] = langs.try_into().map_err(|_| anyhow::anyhow!("languages.tsv must list three languages"))?;
    for (l, want) in languages.iter().zip([EN, HRL, LRL]) {
        if l.id != want {
            bail!("languages.tsv lists {:?} where {want:?} is expected", l.id);
        }
    }
    let mono = |n: &str, lang: &str| -> anyhow::Result<MonolingualCorpus> {
        Ok(MonolingualCorpus {
            lang: lang.to_string(),
            sentences: parse_monolingual(&text(n)?)?,
        })
    };
    let par = |n: &str, a: &str, b: &str| -> anyhow::Result<ParallelCorpus> {
        Ok(ParallelCorpus {
            source_lang: a.to_string(),
            target_lang: b.to_string(),
            pairs: parse_parallel_tsv(&text(n)?)?,
        })
    };
    Ok(DatasetBundle {
        en_hrl: par("en_hrl", EN, HRL)?,
        mono_en: mono("mono_en", EN)?,
        mono_hrl: mono("mono_hrl", HRL)?,
        mono_lrl: mono("mono_lrl", LRL)?,
        dev_en_lrl: par("dev", EN, LRL)?,
        test_en_lrl: par("test", EN, LRL)?,
        languages,
    })
}

/// Detokenized `(source, target)` TSV of id pairs.
pub fn pairs_tsv(vocab: &Vocabulary, pairs: &[(Vec<u32>, Vec<u32>)]) -> anyhow::Result<String> {
    let text: Vec<(Sentence, Sentence)> = pairs
        .iter()
        .map(|(a, b)| Ok((Sentence::new(vocab.detokenize(a))?, Sentence::new(vocab.detokenize(b))?)))
        .collect::<anyhow::Result<_>>()?;
    Ok(format_parallel_tsv(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a/b.txt");
        write_atomic(&p, b"x").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"x");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let a = Lock::acquire(d.path()).unwrap();
        assert!(Lock::acquire(d.path()).is_err());
        drop(a);
        assert!(Lock::acquire(d.path()).is_ok());
    }

    #[test]
    fn metrics_digest_ignores_wall_time() {
        let d = tempfile::tempdir().unwrap();
        let digest = |sub: &str| {
            let mut r = RunDir::open(&d.path().join(sub), 1, "", true).unwrap();
            r.log(&[MetricsRecord::new("x", 1).with("lr", 0.5)]).unwrap();
            std::thread::sleep(std::time::Duration::from_millis(5));
            r.log(&[MetricsRecord::new("x", 2).with("lr", 0.25)]).unwrap();
            r.save().unwrap();
            r.manifest.clone()
        };
        assert_eq!(digest("a"), digest("b"));
    }

    #[test]
    fn tampered_artifacts_fail_verification() {
        let d = tempfile::tempdir().unwrap();
        let mut r = RunDir::open(d.path(), 1, "", true).unwrap();
        r.put("thing", "x/thing.bin", b"abc").unwrap();
        r.verify().unwrap();
        fs::write(d.path().join("x/thing.bin"), b"abd").unwrap();
        assert!(r.verify().is_err());
    }
}
