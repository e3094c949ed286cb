//! Node-level token vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphtask::{join_path, Label, TaskInstance};

pub type TokenId = u32;

pub const SEP: TokenId = 0;
pub const SRC: TokenId = 1;
pub const DST: TokenId = 2;
pub const ANS: TokenId = 3;
pub const EOS: TokenId = 4;
pub const NUM_SPECIAL: u32 = 5;

/// Special tokens the output head can generate, in head order.
pub const GENERATED_SPECIALS: [TokenId; 2] = [ANS, EOS];

/// One token per label in `[label_min, label_max]` plus five markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub label_min: Label,
    pub label_max: Label,
}

impl Vocab {
    pub fn new(label_min: Label, label_max: Label) -> Result<Self> {
        if label_max < label_min {
            return Err(Error::Config(format!(
                "empty label range [{label_min}, {label_max}]"
            )));
        }
        Ok(Self {
            label_min,
            label_max,
        })
    }

    pub fn size(&self) -> usize {
        (NUM_SPECIAL + self.label_max - self.label_min + 1) as usize
    }

    pub fn node(&self, label: Label) -> Result<TokenId> {
        if label < self.label_min || label > self.label_max {
            return Err(Error::Encoding(format!(
                "label {label} outside vocabulary range [{}, {}]",
                self.label_min, self.label_max
            )));
        }
        Ok(NUM_SPECIAL + label - self.label_min)
    }

    pub fn label(&self, token: TokenId) -> Option<Label> {
        (token >= NUM_SPECIAL && (token as usize) < self.size())
            .then(|| token - NUM_SPECIAL + self.label_min)
    }

    pub fn is_node(token: TokenId) -> bool {
        token >= NUM_SPECIAL
    }

    /// Edge pairs each followed by a separator, then the source and
    /// destination behind their markers.
    pub fn encode_instance(&self, instance: &TaskInstance) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(instance.edges.len() * 3 + 4);
        for &(a, b) in &instance.edges {
            out.push(self.node(a)?);
            out.push(self.node(b)?);
            out.push(SEP);
        }
        out.extend([SRC, self.node(instance.source)?, DST, self.node(instance.destination)?]);
        Ok(out)
    }

    /// Inverse of [`Vocab::encode_instance`] up to the gold path, which the
    /// prompt does not carry.
    pub fn decode_prompt(&self, tokens: &[TokenId]) -> Result<(Vec<(Label, Label)>, Label, Label)> {
        let bad = |msg: &str| Error::Encoding(format!("malformed prompt: {msg}"));
        if tokens.len() < 4 {
            return Err(bad("too short"));
        }
        let (edge_part, query) = tokens.split_at(tokens.len() - 4);
        if query[0] != SRC || query[2] != DST {
            return Err(bad("missing source/destination markers"));
        }
        let lab = |t: TokenId| self.label(t).ok_or_else(|| bad("expected a node token"));
        if edge_part.len() % 3 != 0 {
            return Err(bad("edge section is not a sequence of triples"));
        }
        let edges = edge_part
            .chunks(3)
            .map(|c| {
                if c[2] != SEP {
                    return Err(bad("missing separator"));
                }
                Ok((lab(c[0])?, lab(c[1])?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((edges, lab(query[1])?, lab(query[3])?))
    }

    /// Labels between the last answer marker and end-of-sequence. An answer
    /// that is never closed (truncated at the horizon) is no answer, just as
    /// an unbalanced `\boxed{` is not.
    pub fn answer_from_tokens(&self, response: &[TokenId]) -> Option<String> {
        let start = response.iter().rposition(|&t| t == ANS)? + 1;
        let mut labels = Vec::new();
        for &t in &response[start..] {
            if t == EOS {
                return Some(join_path(&labels));
            }
            labels.push(self.label(t)?);
        }
        None
    }

    /// Text form of a response: reasoning labels, then `\boxed{...}`.
    pub fn response_text(&self, response: &[TokenId]) -> String {
        let mut out = String::new();
        let mut in_answer = false;
        let mut first_in_answer = true;
        for &t in response {
            match t {
                ANS => {
                    if in_answer {
                        out.push('}');
                    }
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str("\\boxed{");
                    in_answer = true;
                    first_in_answer = true;
                }
                EOS => break,
                _ => {
                    let label = self.label(t).map(|l| l.to_string()).unwrap_or_default();
                    if in_answer {
                        if !first_in_answer {
                            out.push(',');
                        }
                        first_in_answer = false;
                    } else if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&label);
                }
            }
        }
        if in_answer && response.contains(&EOS) {
            out.push('}');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphtask::{extract_answer, TaskInstance};

    fn appendix() -> TaskInstance {
        TaskInstance {
            edges: TaskInstance::parse_edges("81,252 97,124 285,182 97,285 97,81 124,199").unwrap(),
            source: 97,
            destination: 252,
            gold_path: vec![97, 81, 252],
        }
    }

    #[test]
    fn appendix_encoding() {
        let v = Vocab::new(2, 999).unwrap();
        let toks = v.encode_instance(&appendix()).unwrap();
        let edge_nodes = toks[..toks.len() - 4].iter().filter(|&&t| Vocab::is_node(t)).count();
        assert_eq!(edge_nodes, 12);
        assert_eq!(toks.len(), 6 * 3 + 4);
        let (edges, s, d) = v.decode_prompt(&toks).unwrap();
        assert_eq!(edges, appendix().edges);
        assert_eq!((s, d), (97, 252));
    }

    #[test]
    fn destination_only_changes_tail() {
        let v = Vocab::new(2, 999).unwrap();
        let a = appendix();
        let mut b = a.clone();
        b.destination = 199;
        let ta = v.encode_instance(&a).unwrap();
        let tb = v.encode_instance(&b).unwrap();
        let first_diff = ta.iter().zip(&tb).position(|(x, y)| x != y).unwrap();
        let dst_marker = ta.iter().rposition(|&t| t == DST).unwrap();
        assert!(first_diff > dst_marker);
    }

    #[test]
    fn out_of_range_label() {
        let v = Vocab::new(2, 100).unwrap();
        assert!(matches!(v.encode_instance(&appendix()), Err(Error::Encoding(_))));
    }

    #[test]
    fn answer_tokens_and_text() {
        let v = Vocab::new(2, 999).unwrap();
        let n = |l| v.node(l).unwrap();
        let resp = vec![n(5), ANS, n(1 + 2), ANS, n(97), n(81), n(252), EOS];
        assert_eq!(v.answer_from_tokens(&resp).as_deref(), Some("97,81,252"));
        let text = v.response_text(&resp);
        assert_eq!(extract_answer(&text).as_deref(), Some("97,81,252"));
        assert_eq!(v.answer_from_tokens(&[n(97), n(81)]), None);
        assert_eq!(v.answer_from_tokens(&[ANS, EOS]).as_deref(), Some(""));
        assert_eq!(v.answer_from_tokens(&[ANS, n(97), n(81)]), None);
    }
}
