//! Star-graph path-finding tasks.
//!
//! A star graph has one center node with `degree` disjoint branches hanging
//! off it; every branch holds `path_len - 1` nodes, so the path from the
//! center to any leaf visits exactly `path_len` nodes. A task asks for the
//! path from the center to one leaf, and the outcome reward is 1 only for an
//! exact match.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Node names are plain integers.
pub type Label = u32;

pub const DEFAULT_LABEL_MIN: Label = 2;
pub const DEFAULT_LABEL_MAX: Label = 999;

/// Prompt sent to external text backends.
pub const PROMPT_TEMPLATE: &str = "Given a bi-directional graph in the form of space separated edges, output a path from source node to the destination node in the form of comma separated integers.\n\nFor this question the graph is {edges}\n\nThe source node is {source}\n\nThe destination node is {destination}\n\nPlease reason step by step, and put your final answer within \\boxed{}.";

/// Size of a star graph and the label range its nodes are named from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DifficultySpec {
    pub degree: usize,
    pub path_len: usize,
    pub label_min: Label,
    pub label_max: Label,
}

impl DifficultySpec {
    pub fn new(degree: usize, path_len: usize) -> Self {
        Self {
            degree,
            path_len,
            label_min: DEFAULT_LABEL_MIN,
            label_max: DEFAULT_LABEL_MAX,
        }
    }

    pub fn with_labels(mut self, label_min: Label, label_max: Label) -> Self {
        self.label_min = label_min;
        self.label_max = label_max;
        self
    }

    pub fn node_count(&self) -> usize {
        1 + self.degree * (self.path_len - 1)
    }

    pub fn edge_count(&self) -> usize {
        self.degree * (self.path_len - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree < 1 {
            return Err(Error::Config(format!("degree must be >= 1, got {}", self.degree)));
        }
        if self.path_len < 2 {
            return Err(Error::Config(format!(
                "path_len must be >= 2, got {}",
                self.path_len
            )));
        }
        if self.label_max < self.label_min {
            return Err(Error::Config(format!(
                "empty label range [{}, {}]",
                self.label_min, self.label_max
            )));
        }
        let available = (self.label_max - self.label_min) as usize + 1;
        if available < self.node_count() {
            return Err(Error::Config(format!(
                "label range [{}, {}] holds {} labels but {} needs {} nodes",
                self.label_min,
                self.label_max,
                available,
                self.tag(),
                self.node_count()
            )));
        }
        Ok(())
    }

    pub fn tag(&self) -> DifficultyTag {
        DifficultyTag::new(self.degree, self.path_len)
    }
}

/// Compact difficulty name, `d{degree}p{path_len}`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DifficultyTag {
    pub degree: usize,
    pub path_len: usize,
}

impl DifficultyTag {
    pub fn new(degree: usize, path_len: usize) -> Self {
        Self { degree, path_len }
    }

    pub fn spec(&self, label_min: Label, label_max: Label) -> DifficultySpec {
        DifficultySpec::new(self.degree, self.path_len).with_labels(label_min, label_max)
    }
}

impl fmt::Display for DifficultyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}p{}", self.degree, self.path_len)
    }
}

impl std::str::FromStr for DifficultyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("difficulty tag `{s}` is not of the form d<degree>p<path_len>"));
        let rest = s.trim().strip_prefix('d').ok_or_else(bad)?;
        let (d, p) = rest.split_once('p').ok_or_else(bad)?;
        let degree = d.parse().map_err(|_| bad())?;
        let path_len = p.parse().map_err(|_| bad())?;
        Ok(Self { degree, path_len })
    }
}

impl TryFrom<String> for DifficultyTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DifficultyTag> for String {
    fn from(t: DifficultyTag) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StarGraph {
    pub center: Label,
    /// Each branch lists its nodes from the one adjacent to the center out to
    /// the leaf.
    pub branches: Vec<Vec<Label>>,
}

impl StarGraph {
    pub fn degree(&self) -> usize {
        self.branches.len()
    }

    pub fn node_count(&self) -> usize {
        1 + self.branches.iter().map(Vec::len).sum::<usize>()
    }

    /// Edges in canonical orientation, center side first.
    pub fn edges(&self) -> Vec<(Label, Label)> {
        let mut out = Vec::with_capacity(self.node_count().saturating_sub(1));
        for branch in &self.branches {
            let mut prev = self.center;
            for &node in branch {
                out.push((prev, node));
                prev = node;
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<Label> {
        self.branches.iter().filter_map(|b| b.last().copied()).collect()
    }

    /// Path from the center to `leaf`, or `None` if `leaf` is not a leaf.
    pub fn path_to(&self, leaf: Label) -> Option<Vec<Label>> {
        self.branches
            .iter()
            .find(|b| b.last() == Some(&leaf))
            .map(|b| std::iter::once(self.center).chain(b.iter().copied()).collect())
    }

    pub fn degrees(&self) -> HashMap<Label, usize> {
        let mut deg = HashMap::new();
        for (a, b) in self.edges() {
            *deg.entry(a).or_insert(0) += 1;
            *deg.entry(b).or_insert(0) += 1;
        }
        deg
    }
}

/// One path-finding question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    /// Edges in presentation order and orientation.
    pub edges: Vec<(Label, Label)>,
    pub source: Label,
    pub destination: Label,
    pub gold_path: Vec<Label>,
}

impl TaskInstance {
    pub fn edges_text(&self) -> String {
        self.edges
            .iter()
            .map(|(a, b)| format!("{a},{b}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn gold_text(&self) -> String {
        join_path(&self.gold_path)
    }

    /// Prompt text for external backends.
    pub fn prompt_text(&self) -> String {
        PROMPT_TEMPLATE
            .replace("{edges}", &self.edges_text())
            .replace("{source}", &self.source.to_string())
            .replace("{destination}", &self.destination.to_string())
    }

    /// Every distinct label mentioned by the instance.
    pub fn labels(&self) -> Vec<Label> {
        let mut out: Vec<Label> = self
            .edges
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .chain([self.source, self.destination])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Parse space separated `a,b` pairs.
    pub fn parse_edges(text: &str) -> Result<Vec<(Label, Label)>> {
        text.split_whitespace()
            .map(|pair| {
                let (a, b) = pair
                    .split_once(',')
                    .ok_or_else(|| Error::Encoding(format!("edge `{pair}` is not `a,b`")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<Label>()
                        .map_err(|_| Error::Encoding(format!("bad node label `{s}` in `{pair}`")))
                };
                Ok((parse(a)?, parse(b)?))
            })
            .collect()
    }

    /// Check the gold path against the edge list.
    pub fn verify_gold(&self) -> bool {
        let gold = &self.gold_path;
        if gold.first() != Some(&self.source) || gold.last() != Some(&self.destination) {
            return false;
        }
        gold.windows(2).all(|w| {
            self.edges
                .iter()
                .any(|&(a, b)| (a, b) == (w[0], w[1]) || (b, a) == (w[0], w[1]))
        })
    }
}

pub fn join_path(path: &[Label]) -> String {
    path.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

/// Draw a star graph with distinct labels sampled uniformly from the difficulty's label range.
pub fn generate_star(spec: &DifficultySpec, seed: u64) -> Result<StarGraph> {
    spec.validate()?;
    let mut rng = seed::rng_for(seed, &[stream::GRAPH]);
    let range = (spec.label_max - spec.label_min) as usize + 1;
    let labels: Vec<Label> = rand::seq::index::sample(&mut rng, range, spec.node_count())
        .into_iter()
        .map(|i| spec.label_min + i as Label)
        .collect();
    let center = labels[0];
    let branches = labels[1..]
        .chunks(spec.path_len - 1)
        .map(<[Label]>::to_vec)
        .collect();
    Ok(StarGraph { center, branches })
}

/// Pick a destination leaf and shuffle edge order and orientation.
pub fn render_instance(graph: &StarGraph, seed: u64) -> TaskInstance {
    let mut rng = seed::rng_for(seed, &[stream::RENDER]);
    let leaves = graph.leaves();
    let destination = leaves[rng.gen_range(0..leaves.len())];
    let mut edges = graph.edges();
    edges.shuffle(&mut rng);
    for edge in edges.iter_mut() {
        if rng.gen_bool(0.5) {
            *edge = (edge.1, edge.0);
        }
    }
    let gold_path = graph
        .path_to(destination)
        .expect("destination is drawn from the leaves");
    TaskInstance {
        edges,
        source: graph.center,
        destination,
        gold_path,
    }
}

/// Content of the last `\boxed{...}` with whitespace stripped around each
/// comma separated element. Unbalanced braces count as no answer.
pub fn extract_answer(response: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let start = response.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    let mut end = None;
    for (i, ch) in response[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    end = Some(start + i);
                    break;
                }
            }
            _ => {}
        }
    }
    let inner = &response[start..end?];
    Some(normalize_answer(inner))
}

pub fn normalize_answer(raw: &str) -> String {
    raw.split(',').map(str::trim).collect::<Vec<_>>().join(",")
}

/// Binary outcome reward.
pub fn score(instance: &TaskInstance, answer: Option<&str>) -> f64 {
    match answer {
        Some(a) if normalize_answer(a) == instance.gold_text() => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub instance: TaskInstance,
    pub difficulty: DifficultyTag,
    /// Index of the mixture component the item came from.
    pub component: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub edges: String,
    pub source: String,
    pub destination: String,
    pub gold_path: String,
    pub difficulty: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn histogram(&self) -> BTreeMap<DifficultyTag, usize> {
        let mut h = BTreeMap::new();
        for item in &self.items {
            *h.entry(item.difficulty.clone()).or_insert(0) += 1;
        }
        h
    }

    pub fn by_difficulty(&self) -> BTreeMap<DifficultyTag, Vec<&DatasetItem>> {
        let mut out: BTreeMap<DifficultyTag, Vec<&DatasetItem>> = BTreeMap::new();
        for item in &self.items {
            out.entry(item.difficulty.clone()).or_default().push(item);
        }
        out
    }

    pub fn to_records(&self) -> Vec<DatasetRecord> {
        self.items
            .iter()
            .map(|it| DatasetRecord {
                edges: it.instance.edges_text(),
                source: it.instance.source.to_string(),
                destination: it.instance.destination.to_string(),
                gold_path: it.instance.gold_text(),
                difficulty: it.difficulty.to_string(),
            })
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.to_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut items = Vec::new();
        let mut components: BTreeMap<DifficultyTag, usize> = BTreeMap::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line)?;
            let ctx = |e: Error| Error::Encoding(format!("line {}: {e}", lineno + 1));
            let difficulty: DifficultyTag = rec.difficulty.parse().map_err(ctx)?;
            let parse_label = |s: &str| {
                s.trim()
                    .parse::<Label>()
                    .map_err(|_| Error::Encoding(format!("line {}: bad label `{s}`", lineno + 1)))
            };
            let gold_path = rec
                .gold_path
                .split(',')
                .map(parse_label)
                .collect::<Result<Vec<_>>>()?;
            let instance = TaskInstance {
                edges: TaskInstance::parse_edges(&rec.edges).map_err(ctx)?,
                source: parse_label(&rec.source)?,
                destination: parse_label(&rec.destination)?,
                gold_path,
            };
            if !instance.verify_gold() {
                return Err(Error::Encoding(format!(
                    "line {}: gold path does not follow the edges",
                    lineno + 1
                )));
            }
            let next = components.len();
            let component = *components.entry(difficulty.clone()).or_insert(next);
            items.push(DatasetItem {
                instance,
                difficulty,
                component,
            });
        }
        Ok(Self { items })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Split `total` into integer counts proportional to `weights` (largest remainder).
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Generate a shuffled dataset whose difficulty histogram follows `components`.
pub fn build_mixture(
    components: &[(DifficultySpec, f64)],
    total_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if components.is_empty() {
        return Err(Error::Config("mixture has no components".into()));
    }
    for (spec, p) in components {
        spec.validate()?;
        if !(p.is_finite() && *p > 0.0) {
            return Err(Error::Config(format!(
                "proportion for {} must be positive, got {p}",
                spec.tag()
            )));
        }
    }
    let sum: f64 = components.iter().map(|(_, p)| p).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "mixture proportions sum to {sum}, expected 1"
        )));
    }
    let weights: Vec<f64> = components.iter().map(|(_, p)| *p).collect();
    let counts = apportion(&weights, total_size);
    let mut items = Vec::with_capacity(total_size);
    for (c, ((spec, _), &count)) in components.iter().zip(&counts).enumerate() {
        for k in 0..count {
            let s = seed::derive(seed, &[stream::MIXTURE, c as u64, k as u64]);
            let graph = generate_star(spec, s)?;
            items.push(DatasetItem {
                instance: render_instance(&graph, s),
                difficulty: spec.tag(),
                component: c,
            });
        }
    }
    items.shuffle(&mut seed::rng_for(seed, &[stream::MIXTURE, u64::MAX]));
    Ok(Dataset { items })
}

/// Parse `d2p5:0.25,d5p2:0.75` into difficulty/proportion pairs.
pub fn parse_mixture(text: &str, label_min: Label, label_max: Label) -> Result<Vec<(DifficultySpec, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            let (tag, p) = part.split_once(':').ok_or_else(|| {
                Error::Config(format!("mixture entry `{part}` is not `d<D>p<P>:<proportion>`"))
            })?;
            let tag: DifficultyTag = tag.parse()?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad proportion `{p}` in `{part}`")))?;
            Ok((tag.spec(label_min, label_max), p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix_graph() -> StarGraph {
        StarGraph {
            center: 97,
            branches: vec![vec![81, 252], vec![124, 199], vec![285, 182]],
        }
    }

    #[test]
    fn small_and_large_counts() {
        let g = generate_star(&DifficultySpec::new(3, 3), 1).unwrap();
        assert_eq!(g.node_count(), 7);
        assert_eq!(g.edges().len(), 6);
        assert_eq!(g.degrees()[&g.center], 3);

        let g = generate_star(&DifficultySpec::new(1, 2), 1).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges().len(), 1);

        let g = generate_star(&DifficultySpec::new(10, 10), 1).unwrap();
        assert_eq!(g.node_count(), 91);
        assert_eq!(g.edges().len(), 90);
    }

    #[test]
    fn label_range_too_small() {
        let spec = DifficultySpec::new(3, 3).with_labels(2, 7);
        assert!(matches!(generate_star(&spec, 0), Err(Error::Config(_))));
        let spec = DifficultySpec::new(3, 3).with_labels(2, 8);
        assert!(generate_star(&spec, 0).is_ok());
        assert!(DifficultySpec::new(0, 3).validate().is_err());
        assert!(DifficultySpec::new(2, 1).validate().is_err());
    }

    #[test]
    fn appendix_instance_gold_path() {
        let g = appendix_graph();
        let inst = (0..200)
            .map(|s| render_instance(&g, s))
            .find(|i| i.destination == 252)
            .expect("some seed picks leaf 252");
        assert_eq!(inst.source, 97);
        assert_eq!(inst.gold_path, vec![97, 81, 252]);
        assert!(inst.verify_gold());
        assert_eq!(inst.edges.len(), 6);
    }

    #[test]
    fn appendix_prompt_text() {
        let inst = TaskInstance {
            edges: TaskInstance::parse_edges("81,252  97,124  285,182  97,285  97,81  124,199").unwrap(),
            source: 97,
            destination: 252,
            gold_path: vec![97, 81, 252],
        };
        assert!(inst.verify_gold());
        let prompt = inst.prompt_text();
        assert!(prompt.contains("For this question the graph is 81,252 97,124 285,182 97,285 97,81 124,199\n"));
        assert!(prompt.contains("The source node is 97\n\nThe destination node is 252"));
        assert!(prompt.ends_with("put your final answer within \\boxed{}."));
    }

    #[test]
    fn single_branch_gold_is_whole_graph() {
        let g = generate_star(&DifficultySpec::new(1, 5), 3).unwrap();
        let inst = render_instance(&g, 9);
        let mut all = vec![g.center];
        all.extend(&g.branches[0]);
        assert_eq!(inst.gold_path, all);
    }

    #[test]
    fn render_is_deterministic() {
        let g = generate_star(&DifficultySpec::new(4, 4), 11).unwrap();
        assert_eq!(render_instance(&g, 5), render_instance(&g, 5));
        assert_eq!(generate_star(&DifficultySpec::new(4, 4), 11).unwrap(), g);
    }

    #[test]
    fn orientation_is_mixed() {
        let g = generate_star(&DifficultySpec::new(10, 10), 2).unwrap();
        let inst = render_instance(&g, 2);
        let canonical = g.edges();
        let flipped = inst
            .edges
            .iter()
            .filter(|e| !canonical.contains(e))
            .count();
        assert!(flipped > 10 && flipped < 80, "flipped {flipped}");
    }

    #[test]
    fn extract_answer_cases() {
        assert_eq!(extract_answer("so \\boxed{97,81,252}").as_deref(), Some("97,81,252"));
        assert_eq!(extract_answer("no box here"), None);
        assert_eq!(
            extract_answer("\\boxed{1,2} then \\boxed{97, 81, 252}").as_deref(),
            Some("97,81,252")
        );
        assert_eq!(extract_answer("\\boxed{97,81"), None);
        assert_eq!(extract_answer("\\boxed{}").as_deref(), Some(""));
        assert_eq!(extract_answer("\\boxed{{1},2}").as_deref(), Some("{1},2"));
    }

    #[test]
    fn score_cases() {
        let inst = TaskInstance {
            edges: TaskInstance::parse_edges("81,252 97,124 285,182 97,285 97,81 124,199").unwrap(),
            source: 97,
            destination: 252,
            gold_path: vec![97, 81, 252],
        };
        assert_eq!(score(&inst, Some("97,81,252")), 1.0);
        assert_eq!(score(&inst, Some(" 97 , 81,252 ")), 1.0);
        assert_eq!(score(&inst, Some("97,124,252")), 0.0);
        assert_eq!(score(&inst, None), 0.0);
    }

    #[test]
    fn mixture_counts() {
        let comps = vec![
            (DifficultySpec::new(5, 5), 0.5),
            (DifficultySpec::new(10, 10), 0.5),
        ];
        let ds = build_mixture(&comps, 100, 3).unwrap();
        let h = ds.histogram();
        assert_eq!(h[&DifficultyTag::new(5, 5)], 50);
        assert_eq!(h[&DifficultyTag::new(10, 10)], 50);

        let ds = build_mixture(&[(DifficultySpec::new(3, 3), 1.0)], 17, 3).unwrap();
        assert_eq!(ds.histogram().len(), 1);
        assert_eq!(ds.len(), 17);

        let four = parse_mixture("d2p5:0.25,d5p2:0.25,d5p5:0.25,d10p10:0.25", 2, 999).unwrap();
        let ds = build_mixture(&four, 400, 1).unwrap();
        assert!(ds.histogram().values().all(|&c| c == 100));
    }

    #[test]
    fn mixture_rejects_bad_proportions() {
        let comps = vec![(DifficultySpec::new(2, 2), 0.5), (DifficultySpec::new(3, 3), 0.4)];
        assert!(matches!(build_mixture(&comps, 10, 0), Err(Error::Config(_))));
        let comps = vec![(DifficultySpec::new(2, 2), 1.5), (DifficultySpec::new(3, 3), -0.5)];
        assert!(build_mixture(&comps, 10, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let comps = parse_mixture("d2p3:0.5,d3p2:0.5", 2, 99).unwrap();
        let ds = build_mixture(&comps, 6, 8).unwrap();
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        for k in ["edges", "source", "destination", "gold_path", "difficulty"] {
            assert!(keys.contains(&k.to_string()));
        }
        let back = Dataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.to_records(), ds.to_records());
    }

    #[test]
    fn tag_parsing() {
        let t: DifficultyTag = "d10p10".parse().unwrap();
        assert_eq!(t, DifficultyTag::new(10, 10));
        assert_eq!(t.to_string(), "d10p10");
        assert!("10x10".parse::<DifficultyTag>().is_err());
        assert!("d3".parse::<DifficultyTag>().is_err());
    }

    #[test]
    fn apportion_within_one() {
        let c = apportion(&[1.0 / 3.0; 3], 10);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert!(c.iter().all(|&x| x == 3 || x == 4));
    }
}
