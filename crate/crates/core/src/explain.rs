//! Per-prediction concept contributions and the concept–class map.

use serde::{Deserialize, Serialize};

use crate::data::ConceptBank;
use crate::error::{Error, Result};
use crate::training::{argmax, TrainedModel};

/// Default number of concepts listed per explanation.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept: usize,
    pub text: String,
    pub activation: f64,
    pub weight: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub predicted_class: usize,
    pub logit: f64,
    pub bias: f64,
    /// Largest `|contribution|` first, lowest concept index on ties.
    pub top: Vec<Contribution>,
    /// Sum of the contributions not listed in `top`.
    pub other_sum: f64,
}

impl Explanation {
    /// Text bar chart, one line per listed concept plus the remainder.
    pub fn render_bars(&self, width: usize) -> String {
        let scale = self
            .top
            .iter()
            .map(|c| c.contribution.abs())
            .chain([self.other_sum.abs()])
            .fold(0.0, f64::max);
        let bar = |v: f64| {
            let len = if scale > 0.0 {
                ((v.abs() / scale) * width as f64).round() as usize
            } else {
                0
            };
            let ch = if v < 0.0 { '-' } else { '#' };
            std::iter::repeat_n(ch, len).collect::<String>()
        };
        let label_width = self
            .top
            .iter()
            .map(|c| c.text.chars().count())
            .chain(["sum of other concepts".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!(
            "class {} (logit {:+.4}, bias {:+.4})\n",
            self.predicted_class, self.logit, self.bias
        );
        for c in &self.top {
            out.push_str(&format!(
                "  {:<label_width$}  {:+.4} {}\n",
                c.text,
                c.contribution,
                bar(c.contribution)
            ));
        }
        out.push_str(&format!(
            "  {:<label_width$}  {:+.4} {}\n",
            "sum of other concepts",
            self.other_sum,
            bar(self.other_sum)
        ));
        out
    }
}

/// Explains the model's prediction for one embedding: each concept
/// contributes its normalized activation times the predicted class's weight.
pub fn explain_prediction(model: &TrainedModel, z: &[f64], top_k: usize) -> Result<Explanation> {
    if top_k == 0 {
        return Err(Error::out_of_range("top_k", 0, ">= 1"));
    }
    if z.len() != model.head.inputs {
        return Err(Error::DimensionMismatch(format!(
            "model expects {}-dim embeddings, got {}",
            model.head.inputs,
            z.len()
        )));
    }
    let h = model.activations(z);
    let clf = &model.classifier;
    let logits = clf.logits(&h);
    let predicted = argmax(&logits);
    let weights = clf.head.weight_row(predicted);
    let mut all: Vec<Contribution> = h
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(j, (&activation, &weight))| Contribution {
            concept: j,
            text: model.concepts[j].clone(),
            activation,
            weight,
            contribution: activation * weight,
        })
        .collect();
    all.sort_by(|a, b| {
        b.contribution
            .abs()
            .total_cmp(&a.contribution.abs())
            .then(a.concept.cmp(&b.concept))
    });
    let rest = all.split_off(top_k.min(all.len()));
    Ok(Explanation {
        predicted_class: predicted,
        logit: logits[predicted],
        bias: clf.head.b[predicted],
        top: all,
        other_sum: rest.iter().map(|c| c.contribution).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub text: String,
    pub classes: Vec<usize>,
    pub exclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptClassMap {
    pub num_classes: usize,
    pub concepts: Vec<ConceptNode>,
}

impl ConceptClassMap {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("map serializes");
        s.push('\n');
        s
    }

    /// Undirected bipartite graph in DOT syntax.
    pub fn to_dot(&self, class_names: Option<&[String]>) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let class_label = |y: usize| {
            class_names
                .and_then(|names| names.get(y))
                .cloned()
                .unwrap_or_else(|| format!("class {y}"))
        };
        let mut out = String::from("graph concept_class_map {\n  rankdir=LR;\n");
        for y in 0..self.num_classes {
            out.push_str(&format!(
                "  y{y} [shape=box, label=\"{}\"];\n",
                esc(&class_label(y))
            ));
        }
        for (j, c) in self.concepts.iter().enumerate() {
            let style = if c.exclusive { "dashed" } else { "solid" };
            out.push_str(&format!(
                "  c{j} [shape=ellipse, style={style}, label=\"{}\"];\n",
                esc(&c.text)
            ));
        }
        for (j, c) in self.concepts.iter().enumerate() {
            for y in &c.classes {
                out.push_str(&format!("  c{j} -- y{y};\n"));
            }
        }
        out.push_str("}\n");
        out
    }
}

pub fn export_concept_map(bank: &ConceptBank) -> ConceptClassMap {
    ConceptClassMap {
        num_classes: bank.num_classes(),
        concepts: bank
            .concepts()
            .iter()
            .map(|c| ConceptNode {
                text: c.text.clone(),
                classes: c.classes.clone(),
                exclusive: c.is_exclusive(),
            })
            .collect(),
    }
}
