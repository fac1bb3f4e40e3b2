//! Declarative network description and its `key = value` text form.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Plain,
    PlainResidual,
    Mixed,
    MixedResidual,
    /// Same topology as the shared families, every convolution unshared.
    Free,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Plain => "plain",
            Family::PlainResidual => "plain_residual",
            Family::Mixed => "mixed",
            Family::MixedResidual => "mixed_residual",
            Family::Free => "free",
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "plain" => Family::Plain,
            "plain_residual" => Family::PlainResidual,
            "mixed" => Family::Mixed,
            "mixed_residual" => Family::MixedResidual,
            "free" => Family::Free,
            other => return Err(format!("unknown family `{other}`")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Channels {
    Constant(usize),
    /// Working channel count of each section.
    Pattern(Vec<usize>),
}

impl Channels {
    pub fn of_section(&self, s: usize) -> usize {
        match self {
            Channels::Constant(c) => *c,
            Channels::Pattern(p) => p[s],
        }
    }
}

/// Depth above which plain stacks must use residual blocks.
pub const MAX_NON_RESIDUAL_DEPTH: usize = 17;
pub const DEFAULT_PATTERN: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub family: Family,
    /// Number of body convolutions (expansion layer and classifier excluded).
    pub depth: usize,
    pub channels: Channels,
    pub num_classes: usize,
    pub sections: usize,
    /// Section indices whose residual blocks each get a regulator.
    pub regulators: BTreeSet<usize>,
    pub input_size: (usize, usize),
    /// Units per section: body convolutions for non-residual nets, blocks
    /// for residual nets. `None` means an even split.
    pub stages: Option<Vec<usize>>,
    pub batchnorm: bool,
}

/// Resolved per-section layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Plain (non-block) body units placed at the start of section 0.
    pub leading: usize,
    /// Units per section: convolutions, or residual blocks when residual.
    pub per_section: Vec<usize>,
}

/// Splits `total` into `parts` contiguous counts, earlier parts taking the
/// remainder.
pub fn even_split(total: usize, parts: usize) -> Vec<usize> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + usize::from(i < r)).collect()
}

impl NetworkSpec {
    pub fn new(family: Family, depth: usize) -> Self {
        let channels = match family {
            Family::Mixed | Family::MixedResidual => Channels::Pattern(DEFAULT_PATTERN.to_vec()),
            _ => Channels::Constant(128),
        };
        NetworkSpec {
            family,
            depth,
            channels,
            num_classes: 100,
            sections: 4,
            regulators: BTreeSet::new(),
            input_size: (32, 32),
            stages: None,
            batchnorm: true,
        }
    }

    pub fn plain(depth: usize, channels: usize, classes: usize) -> Self {
        let family = if depth > MAX_NON_RESIDUAL_DEPTH {
            Family::PlainResidual
        } else {
            Family::Plain
        };
        NetworkSpec {
            channels: Channels::Constant(channels),
            num_classes: classes,
            ..Self::new(family, depth)
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        self
    }

    pub fn with_sections(mut self, sections: usize) -> Self {
        self.sections = sections;
        self
    }

    pub fn with_regulators(mut self, sections: impl IntoIterator<Item = usize>) -> Self {
        self.regulators = sections.into_iter().collect();
        self
    }

    pub fn with_stages(mut self, stages: Vec<usize>) -> Self {
        self.stages = Some(stages);
        self
    }

    pub fn without_batchnorm(mut self) -> Self {
        self.batchnorm = false;
        self
    }

    /// Free nets follow the depth rule: residual iff deeper than 17.
    pub fn is_residual(&self) -> bool {
        match self.family {
            Family::PlainResidual | Family::MixedResidual => true,
            Family::Free => self.depth > MAX_NON_RESIDUAL_DEPTH,
            Family::Plain | Family::Mixed => false,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.family != Family::Free
    }

    fn is_mixed_topology(&self) -> bool {
        matches!(self.channels, Channels::Pattern(_))
    }

    pub fn validate(&self) -> Result<Layout> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.depth < 3 {
            return bad(format!("depth must be >= 3, got {}", self.depth));
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.sections == 0 {
            return bad("sections must be >= 1".into());
        }
        match (&self.family, &self.channels) {
            (Family::Plain | Family::PlainResidual, Channels::Pattern(_)) => {
                return bad("plain families take a single channel count".into())
            }
            (Family::Mixed | Family::MixedResidual, Channels::Constant(_)) => {
                return bad("mixed families take a channel pattern".into())
            }
            _ => {}
        }
        match &self.channels {
            Channels::Constant(0) => return bad("channels must be >= 1".into()),
            Channels::Pattern(p) => {
                if p.len() != self.sections {
                    return bad(format!(
                        "channel pattern has {} entries but sections = {}",
                        p.len(),
                        self.sections
                    ));
                }
                if p.contains(&0) {
                    return bad("channels must be >= 1".into());
                }
            }
            _ => {}
        }
        if self.depth > MAX_NON_RESIDUAL_DEPTH && !self.is_residual() {
            return bad(format!(
                "depth {} > {MAX_NON_RESIDUAL_DEPTH} requires a residual family",
                self.depth
            ));
        }
        let (h, w) = self.input_size;
        let max_sections = (h.min(w).max(1)).ilog2() as usize;
        if self.sections > max_sections {
            return bad(format!(
                "{} sections exceed floor(log2(min(H, W))) = {max_sections} for {h}x{w} input",
                self.sections
            ));
        }
        let shrink = 1usize << (self.sections - 1);
        if h % shrink != 0 || w % shrink != 0 {
            return bad(format!("{h}x{w} input cannot be pooled {} times", self.sections - 1));
        }
        if let Some(&s) = self.regulators.iter().find(|&&s| s >= self.sections) {
            return bad(format!("regulator section {s} out of range"));
        }
        if !self.regulators.is_empty() && !self.is_residual() {
            return bad("regulators attach to residual blocks; family is not residual".into());
        }

        let layout = if self.is_residual() {
            let blocks = match &self.stages {
                Some(st) => st.clone(),
                None => {
                    let n = (self.depth - 2) / 2;
                    even_split(n, self.sections)
                }
            };
            let used = 2 * blocks.iter().sum::<usize>();
            if used > self.depth || used == 0 {
                return bad(format!(
                    "{} residual blocks do not fit depth {}",
                    used / 2,
                    self.depth
                ));
            }
            Layout {
                leading: self.depth - used,
                per_section: blocks,
            }
        } else {
            let units = match &self.stages {
                Some(st) => st.clone(),
                None => even_split(self.depth, self.sections),
            };
            if units.iter().sum::<usize>() != self.depth {
                return bad(format!("stages sum to {} but depth is {}", units.iter().sum::<usize>(), self.depth));
            }
            Layout {
                leading: 0,
                per_section: units,
            }
        };
        if layout.per_section.len() != self.sections {
            return bad(format!(
                "stages has {} entries but sections = {}",
                layout.per_section.len(),
                self.sections
            ));
        }
        if self.is_mixed_topology() {
            for s in 1..self.sections {
                let expands = self.channels.of_section(s) != self.channels.of_section(s - 1);
                let n = layout.per_section[s];
                // Shared sections need a layer on the shared kernel besides
                // the transition; a residual block provides both.
                let need = match (self.is_shared(), self.is_residual(), expands) {
                    (true, false, true) => 2,
                    (_, _, true) | (true, _, false) => 1,
                    (false, _, false) => 0,
                };
                if n < need {
                    return bad(format!("section {s} needs at least {need} units, has {n}"));
                }
            }
            if self.is_shared() && layout.leading + layout.per_section[0] == 0 {
                return bad("section 0 has no layer using its shared kernel".into());
            }
        }
        Ok(layout)
    }

    /// Serializes to the `key = value` format accepted by [`NetworkSpec::parse`].
    pub fn to_config_string(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        s.push_str(&format!("family = {}\n", self.family.as_str()));
        s.push_str(&format!("depth = {}\n", self.depth));
        match &self.channels {
            Channels::Constant(c) => s.push_str(&format!("channels = {c}\n")),
            // A trailing comma keeps one-section patterns distinct from constants.
            Channels::Pattern(p) if p.len() == 1 => {
                s.push_str(&format!("channels = {},\n", p[0]))
            }
            Channels::Pattern(p) => s.push_str(&format!("channels = {}\n", join(p))),
        }
        s.push_str(&format!("classes = {}\n", self.num_classes));
        s.push_str(&format!("sections = {}\n", self.sections));
        let regs: Vec<usize> = self.regulators.iter().copied().collect();
        s.push_str(&format!(
            "regulators = {}\n",
            if regs.is_empty() { "none".to_string() } else { join(&regs) }
        ));
        s.push_str(&format!("input_size = {}x{}\n", self.input_size.0, self.input_size.1));
        if let Some(st) = &self.stages {
            s.push_str(&format!("stages = {}\n", join(st)));
        }
        if !self.batchnorm {
            s.push_str("batchnorm = false\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(ConfigFile::parse(text)?.network)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_config_string())
    }
}

/// Optional run settings that may sit next to the network keys. Command-line
/// flags take precedence over these.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSettings {
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub network: NetworkSpec,
    pub run: RunSettings,
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("`{}`: {e}", t.trim())))
        .collect()
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut family: Option<Family> = None;
        let mut depth: Option<usize> = None;
        let mut channels: Option<Channels> = None;
        let mut classes = None;
        let mut sections = None;
        let mut regulators: Option<String> = None;
        let mut input_size = None;
        let mut stages = None;
        let mut batchnorm = None;
        let mut run = RunSettings::default();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "family" => family = Some(value.parse().map_err(err)?),
                "depth" => depth = Some(num(value)?),
                "channels" => {
                    let list = parse_list(value).map_err(|m| err(format!("channels: {m}")))?;
                    if list.is_empty() {
                        return Err(err("channels: empty list".into()));
                    }
                    channels = Some(if !value.contains(',') {
                        Channels::Constant(list[0])
                    } else {
                        Channels::Pattern(list)
                    });
                }
                "classes" => classes = Some(num(value)?),
                "sections" => sections = Some(num(value)?),
                "regulators" => regulators = Some(value.to_string()),
                "input_size" => {
                    let (h, w) = match value.split_once('x') {
                        Some((h, w)) => (num(h.trim())?, num(w.trim())?),
                        None => {
                            let s = num(value)?;
                            (s, s)
                        }
                    };
                    input_size = Some((h, w));
                }
                "stages" => {
                    stages = Some(parse_list(value).map_err(|m| err(format!("stages: {m}")))?)
                }
                "batchnorm" => {
                    batchnorm = Some(match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(err(format!("batchnorm: expected true|false, got `{value}`"))),
                    })
                }
                "epochs" => run.epochs = Some(num(value)?),
                "batch" => run.batch = Some(num(value)?),
                "steps" => run.steps = Some(num(value)?),
                "seed" => {
                    run.seed = Some(value.parse().map_err(|e| err(format!("seed: {e}")))?)
                }
                "lr" => run.lr = Some(value.parse().map_err(|e| err(format!("lr: {e}")))?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }

        let missing = |k: &str| Error::Parse {
            line: 0,
            msg: format!("missing required key `{k}`"),
        };
        let family = family.ok_or_else(|| missing("family"))?;
        let depth = depth.ok_or_else(|| missing("depth"))?;
        let mut spec = NetworkSpec::new(family, depth);
        if let Some(c) = channels {
            spec.channels = c;
        }
        if let Some(k) = classes {
            spec.num_classes = k;
        }
        if let Some(s) = sections {
            spec.sections = s;
        }
        if let Some(sz) = input_size {
            spec.input_size = sz;
        }
        spec.stages = stages;
        if let Some(b) = batchnorm {
            spec.batchnorm = b;
        }
        if let Some(r) = regulators {
            spec.regulators = match r.as_str() {
                "" | "none" => BTreeSet::new(),
                "all" => (0..spec.sections).collect(),
                list => parse_list(list)
                    .map_err(|m| Error::Parse {
                        line: 0,
                        msg: format!("regulators: {m}"),
                    })?
                    .into_iter()
                    .collect(),
            };
        }
        Ok(ConfigFile { network: spec, run })
    }
}
