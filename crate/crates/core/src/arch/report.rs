//! Parameter accounting.
//!
//! Counting convention: every convolution kernel, every batch-norm
//! gamma/beta pair and the classifier weight plus bias. Batch-norm running
//! statistics are buffers and are not counted; convolutions carry no bias.
//! A shared kernel is counted once no matter how many layers use it.

use std::fmt;

use indexmap::IndexMap;

use super::network::Network;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub shapes: Vec<Vec<usize>>,
    pub count: usize,
    /// Layer positions referencing this group.
    pub shared_use_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub groups: Vec<GroupReport>,
    pub total: usize,
    pub total_millions: f64,
}

impl ParamReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn millions(&self) -> f64 {
        self.total as f64 / 1e6
    }

    pub fn bn_groups(&self) -> usize {
        self.groups.iter().filter(|g| g.name.starts_with("W_bn_")).count()
    }

    /// Distinct 3×3 convolution kernels.
    pub fn conv3x3_groups(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.shapes.len() == 1 && g.shapes[0].len() == 4 && g.shapes[0][2..] == [3, 3])
            .count()
    }
}

pub fn count_params(net: &Network) -> ParamReport {
    let sites = net.conv_use_sites();
    let mut groups: IndexMap<String, GroupReport> = IndexMap::new();
    for (name, p) in net.params().iter() {
        let entry = groups.entry(p.group.clone()).or_insert_with(|| GroupReport {
            name: p.group.clone(),
            shapes: Vec::new(),
            count: 0,
            shared_use_count: sites.get(name).copied().unwrap_or(1),
        });
        entry.shapes.push(p.tensor.shape().to_vec());
        entry.count += p.tensor.numel();
    }
    let groups: Vec<GroupReport> = groups.into_values().collect();
    let total = groups.iter().map(|g| g.count).sum::<usize>();
    ParamReport {
        groups,
        total,
        total_millions: (total as f64 / 1e4).round() / 100.0,
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:<24} {:>10} {:>6}", "group", "shape", "params", "uses")?;
        for g in &self.groups {
            let shape = g
                .shapes
                .iter()
                .map(|s| format!("{s:?}"))
                .collect::<Vec<_>>()
                .join("+");
            writeln!(f, "{:<20} {:<24} {:>10} {:>6}", g.name, shape, g.count, g.shared_use_count)?;
        }
        writeln!(f, "total = {} ({:.2} M)", self.total, self.total_millions)
    }
}
