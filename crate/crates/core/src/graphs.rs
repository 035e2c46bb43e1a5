//! Graph structures and the star-graph counting benchmark.
//!
//! The benchmark task: a star graph whose leaves each carry one colored edge
//! into the centroid, and a query pair of distinct colors `(x, y)`. The label
//! asks whether color `x` appears on strictly more edges than color `y`.
//! Every edge colored `x` or `y` is evidence the task needs; no other edge
//! is — which makes the ground-truth explanation exact and lets attribution
//! methods be scored against it.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directed multigraph with typed edges. Edge index order is stable and is
/// the canonical identifier used by every gate and attribution structure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub num_vertices: usize,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

impl Graph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= self.num_vertices || e.dst >= self.num_vertices {
                return Err(Error::Data(format!(
                    "edge {i} ({} -> {}) out of range for {} vertices",
                    e.src, e.dst, self.num_vertices
                )));
            }
        }
        Ok(())
    }
}

/// One benchmark example: the star graph, its edge colors, the query pair,
/// the label, and the ground-truth relevance mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StarGraphExample {
    pub graph: Graph,
    /// Color of each edge, indexed like `graph.edges`.
    pub colors: Vec<usize>,
    /// Ordered query pair (x, y), x != y.
    pub query: (usize, usize),
    /// True iff x-colored edges strictly outnumber y-colored edges.
    pub label: bool,
    /// True for edges colored x or y.
    pub gold_mask: Vec<bool>,
}

/// Ground-truth relevance: edges carrying either queried color. Applied
/// identically on true- and false-labeled examples — the model has to count
/// both colors to answer either way.
pub fn gold_mask(colors: &[usize], query: (usize, usize)) -> Vec<bool> {
    colors
        .iter()
        .map(|&c| c == query.0 || c == query.1)
        .collect()
}

fn count_label(colors: &[usize], query: (usize, usize)) -> bool {
    let x = colors.iter().filter(|&&c| c == query.0).count();
    let y = colors.iter().filter(|&&c| c == query.1).count();
    x > y
}

impl StarGraphExample {
    /// Build an example from leaf colors and a query; the label and gold
    /// mask are derived. Vertex 0 is the centroid; leaf i becomes vertex
    /// i+1 with a single edge into the centroid whose relation is its color.
    pub fn new(colors: Vec<usize>, query: (usize, usize)) -> Result<Self> {
        if query.0 == query.1 {
            return Err(Error::Data(format!(
                "query colors must be distinct, got ({}, {})",
                query.0, query.1
            )));
        }
        if colors.is_empty() {
            return Err(Error::Data("star graph needs at least one leaf".into()));
        }
        let edges: Vec<Edge> = colors
            .iter()
            .enumerate()
            .map(|(i, &c)| Edge {
                src: i + 1,
                dst: 0,
                relation: c,
            })
            .collect();
        let graph = Graph {
            num_vertices: colors.len() + 1,
            edges,
        };
        let label = count_label(&colors, query);
        let mask = gold_mask(&colors, query);
        Ok(StarGraphExample {
            graph,
            query,
            label,
            gold_mask: mask,
            colors,
        })
    }

    pub fn num_edges(&self) -> usize {
        self.graph.num_edges()
    }
}

/// Generation settings for the benchmark dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Total examples across all splits.
    pub count: usize,
    pub num_colors: usize,
    /// Train/validation/test fractions; must sum to 1.
    pub split: (f64, f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            count: 12_000,
            num_colors: 6,
            // 10k / 1k / 1k
            split: (5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<StarGraphExample>,
    pub validation: Vec<StarGraphExample>,
    pub test: Vec<StarGraphExample>,
}

fn sample_example<R: Rng>(rng: &mut R, num_colors: usize) -> StarGraphExample {
    let n = rng.gen_range(6..=12);
    let colors: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_colors)).collect();
    let x = rng.gen_range(0..num_colors);
    let mut y = rng.gen_range(0..num_colors - 1);
    if y >= x {
        y += 1;
    }
    StarGraphExample::new(colors, (x, y)).expect("sampled example is valid by construction")
}

const BALANCE_RANGE: (f64, f64) = (0.3, 0.7);
const BALANCE_ATTEMPTS: usize = 100;

/// Generate the benchmark splits. Deterministic given the config. The whole
/// pool is resampled (from the continuing RNG stream) until the fraction of
/// true labels lands in [0.3, 0.7]; configurations that can never balance
/// (e.g. a single example) are reported as errors.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<DatasetSplits> {
    if cfg.count == 0 {
        return Err(Error::Config("dataset count must be positive".into()));
    }
    if cfg.num_colors < 2 {
        return Err(Error::Config(format!(
            "need at least 2 colors to form a query, got {}",
            cfg.num_colors
        )));
    }
    let (a, b, c) = cfg.split;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pool = None;
    for _ in 0..BALANCE_ATTEMPTS {
        let cand: Vec<StarGraphExample> = (0..cfg.count)
            .map(|_| sample_example(&mut rng, cfg.num_colors))
            .collect();
        let frac = cand.iter().filter(|e| e.label).count() as f64 / cand.len() as f64;
        if (BALANCE_RANGE.0..=BALANCE_RANGE.1).contains(&frac) {
            pool = Some(cand);
            break;
        }
    }
    let pool = pool.ok_or_else(|| {
        Error::Data(format!(
            "could not draw a label-balanced dataset (target {:?}) in {BALANCE_ATTEMPTS} attempts; \
             count {} may be too small",
            BALANCE_RANGE, cfg.count
        ))
    })?;

    let n_train = (cfg.count as f64 * a).round() as usize;
    let n_val = (cfg.count as f64 * b).round() as usize;
    let n_train = n_train.min(cfg.count);
    let n_val = n_val.min(cfg.count - n_train);

    let mut pool = pool;
    let test = pool.split_off(n_train + n_val);
    let validation = pool.split_off(n_train);
    Ok(DatasetSplits {
        train: pool,
        validation,
        test,
    })
}

/// Wire format for one JSONL record.
#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    leaves: Vec<usize>,
    query: [usize; 2],
    label: bool,
}

/// Write examples as JSON Lines: `{"leaves":[...],"query":[x,y],"label":b}`.
pub fn save_jsonl(path: &Path, examples: &[StarGraphExample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let rec = ExampleRecord {
            leaves: ex.colors.clone(),
            query: [ex.query.0, ex.query.1],
            label: ex.label,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a JSONL dataset, rebuilding graphs and masks and verifying that each
/// stored label matches the recomputed one.
pub fn load_jsonl(path: &Path) -> Result<Vec<StarGraphExample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed example: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        let ex = StarGraphExample::new(rec.leaves, (rec.query[0], rec.query[1]))
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if ex.label != rec.label {
            return Err(Error::Data(format!(
                "{}:{}: stored label {} disagrees with recomputed label {}",
                path.display(),
                lineno + 1,
                rec.label,
                ex.label
            )));
        }
        examples.push(ex);
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_and_mask_from_colors() {
        // colors [x,x,y,z] for query (x,y): 2 > 1, everything but z relevant
        let ex = StarGraphExample::new(vec![0, 0, 1, 2], (0, 1)).unwrap();
        assert!(ex.label);
        assert_eq!(ex.gold_mask, vec![true, true, true, false]);

        // colors [y,y,x]: 1 > 2 is false; all three carry queried colors
        let ex = StarGraphExample::new(vec![1, 1, 0], (0, 1)).unwrap();
        assert!(!ex.label);
        assert_eq!(ex.gold_mask, vec![true, true, true]);
    }

    #[test]
    fn tie_is_false() {
        let ex = StarGraphExample::new(vec![0, 1], (0, 1)).unwrap();
        assert!(!ex.label);
    }

    #[test]
    fn gold_mask_edge_cases() {
        assert_eq!(gold_mask(&[0, 1, 2, 3], (0, 2)), [true, false, true, false]);
        assert_eq!(gold_mask(&[5, 5, 5], (5, 1)), [true, true, true]);
        assert_eq!(gold_mask(&[2, 3], (0, 1)), [false, false]);
    }

    #[test]
    fn gold_mask_permutes_with_edges() {
        let colors = vec![0, 3, 1, 0, 2];
        let base = gold_mask(&colors, (0, 1));
        let perm = [4, 2, 0, 1, 3];
        let shuffled: Vec<usize> = perm.iter().map(|&i| colors[i]).collect();
        let shuffled_mask = gold_mask(&shuffled, (0, 1));
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(shuffled_mask[j], base[i]);
        }
    }

    #[test]
    fn star_topology() {
        let ex = StarGraphExample::new(vec![0, 1, 2], (0, 1)).unwrap();
        assert_eq!(ex.graph.num_vertices, 4);
        assert_eq!(ex.graph.num_edges(), 3);
        for (i, e) in ex.graph.edges.iter().enumerate() {
            assert_eq!(e.src, i + 1);
            assert_eq!(e.dst, 0);
            assert_eq!(e.relation, ex.colors[i]);
        }
        ex.graph.validate().unwrap();
    }

    #[test]
    fn rejects_degenerate_queries() {
        assert!(StarGraphExample::new(vec![0, 1], (2, 2)).is_err());
        assert!(StarGraphExample::new(vec![], (0, 1)).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_in_bounds() {
        let cfg = DatasetConfig {
            seed: 7,
            count: 300,
            ..DatasetConfig::default()
        };
        let d1 = generate_dataset(&cfg).unwrap();
        let d2 = generate_dataset(&cfg).unwrap();
        assert_eq!(d1.train, d2.train);
        assert_eq!(d1.test, d2.test);
        assert_eq!(
            d1.train.len() + d1.validation.len() + d1.test.len(),
            300
        );
        for ex in d1.train.iter().chain(&d1.validation).chain(&d1.test) {
            assert!((6..=12).contains(&ex.colors.len()));
            assert!(ex.colors.iter().all(|&c| c < 6));
            assert_ne!(ex.query.0, ex.query.1);
            assert!(ex.query.0 < 6 && ex.query.1 < 6);
            assert_eq!(ex.label, count_label(&ex.colors, ex.query));
        }
    }

    #[test]
    fn pool_is_label_balanced() {
        let cfg = DatasetConfig {
            seed: 0,
            count: 1000,
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        let all: Vec<_> = d
            .train
            .iter()
            .chain(&d.validation)
            .chain(&d.test)
            .collect();
        let frac = all.iter().filter(|e| e.label).count() as f64 / all.len() as f64;
        assert!((0.3..=0.7).contains(&frac), "balance {frac}");
    }

    #[test]
    fn impossible_balance_is_an_error() {
        let cfg = DatasetConfig {
            seed: 0,
            count: 1,
            split: (1.0, 0.0, 0.0),
            ..DatasetConfig::default()
        };
        // A single example has label fraction 0 or 1, never in [0.3, 0.7].
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DatasetConfig::default();
        cfg.num_colors = 1;
        assert!(generate_dataset(&cfg).is_err());
        let mut cfg = DatasetConfig::default();
        cfg.split = (0.5, 0.2, 0.2);
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = std::env::temp_dir().join("gm-jsonl-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dataset.jsonl");

        let cfg = DatasetConfig {
            seed: 3,
            count: 120,
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        save_jsonl(&path, &d.validation).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded, d.validation);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn jsonl_rejects_corrupt_lines() {
        let dir = std::env::temp_dir().join("gm-jsonl-test");
        std::fs::create_dir_all(&dir).unwrap();

        let bad_label = dir.join("bad-label.jsonl");
        std::fs::write(
            &bad_label,
            "{\"leaves\":[0,0,1],\"query\":[0,1],\"label\":false}\n",
        )
        .unwrap();
        let err = load_jsonl(&bad_label).unwrap_err().to_string();
        assert!(err.contains("disagrees"), "got: {err}");

        let malformed = dir.join("malformed.jsonl");
        std::fs::write(&malformed, "{not json}\n").unwrap();
        assert!(load_jsonl(&malformed).is_err());

        std::fs::remove_file(&bad_label).ok();
        std::fs::remove_file(&malformed).ok();
    }
}
