//! Netlist grammar.
//!
//! One element per line. Either the explicit form `R <name> <n+> <n-> <value>`
//! or the SPICE form `R1 <n+> <n-> <value>` where the element kind is the
//! name's leading letter(s). `#` and `*` start comments. Node `0` (or `gnd`)
//! is ground.
//!
//! ```text
//! R|L|C  name n+ n- value
//! V|I    name n+ n- dc <v> | sine <f> <amp> [phase_deg] | gauss <f0> <fbw> <amp> [delay] | step <amp> [t0]
//! D      name n+ n- is=<A> n=<val> vt=<V>
//! P      name n+ n- port=<q>
//! DD     name n+ n- file=<path>
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Time-dependent source value.
#[derive(Debug, Clone, PartialEq)]
pub enum Waveform {
    Dc(f64),
    /// `amp * sin(2 pi f t + phase)`.
    Sine { freq: f64, amp: f64, phase: f64 },
    /// `amp * cos(2 pi f0 (t - delay)) * exp(-(t - delay)^2 / (2 sigma^2))`,
    /// `sigma = 3 / (2 pi f_bw)`.
    ModulatedGaussian { f0: f64, fbw: f64, amp: f64, delay: f64 },
    /// `amp` for `t > t0`, zero before.
    Step { amp: f64, t0: f64 },
}

impl Waveform {
    pub fn modulated_gaussian(f0: f64, fbw: f64, amp: f64) -> Self {
        let sigma = 3.0 / (2.0 * PI * fbw);
        Waveform::ModulatedGaussian {
            f0,
            fbw,
            amp,
            delay: 6.0 * sigma,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Waveform::Dc(v) => v,
            Waveform::Sine { freq, amp, phase } => amp * (2.0 * PI * freq * t + phase).sin(),
            Waveform::ModulatedGaussian { f0, fbw, amp, delay } => {
                let sigma = 3.0 / (2.0 * PI * fbw);
                let u = t - delay;
                amp * (2.0 * PI * f0 * u).cos() * (-u * u / (2.0 * sigma * sigma)).exp()
            }
            Waveform::Step { amp, t0 } => {
                if t > t0 {
                    amp
                } else {
                    0.0
                }
            }
        }
    }

    /// Highest frequency of interest, `f0 + f_bw` for Gaussian pulses.
    pub fn f_max(&self) -> Option<f64> {
        match *self {
            Waveform::ModulatedGaussian { f0, fbw, .. } => Some(f0 + fbw),
            Waveform::Sine { freq, .. } => Some(freq),
            _ => None,
        }
    }

    /// Value with every amplitude multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut w = self.clone();
        match &mut w {
            Waveform::Dc(v) => *v *= s,
            Waveform::Sine { amp, .. }
            | Waveform::ModulatedGaussian { amp, .. }
            | Waveform::Step { amp, .. } => *amp *= s,
        }
        w
    }
}

/// Shockley diode parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiodeParams {
    pub is: f64,
    pub n: f64,
    pub vt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ElementKind {
    Resistor(f64),
    Capacitor(f64),
    Inductor(f64),
    VoltageSource(Waveform),
    CurrentSource(Waveform),
    Diode(DiodeParams),
    Port(usize),
    Device(String),
}

impl ElementKind {
    /// Elements whose current is an extra MNA unknown.
    pub fn has_branch_current(&self) -> bool {
        matches!(
            self,
            ElementKind::VoltageSource(_) | ElementKind::Inductor(_) | ElementKind::Port(_)
        )
    }
}

/// One element; node index 0 is ground.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub kind: ElementKind,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    /// Node names; index 0 is ground.
    pub nodes: Vec<String>,
    pub elements: Vec<Element>,
}

impl Netlist {
    /// Number of non-ground nodes.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        let key = canonical_node(name);
        self.nodes.iter().position(|n| *n == key)
    }

    /// Port ids in ascending order together with the element index.
    pub fn ports(&self) -> Vec<(usize, usize)> {
        let mut p: Vec<_> = self
            .elements
            .iter()
            .enumerate()
            .filter_map(|(i, e)| match e.kind {
                ElementKind::Port(q) => Some((q, i)),
                _ => None,
            })
            .collect();
        p.sort();
        p
    }

    pub fn n_ports(&self) -> usize {
        self.ports().len()
    }

    pub fn is_linear(&self) -> bool {
        !self
            .elements
            .iter()
            .any(|e| matches!(e.kind, ElementKind::Diode(_) | ElementKind::Device(_)))
    }

    /// Largest source frequency content, if any source declares one.
    pub fn f_max(&self) -> Option<f64> {
        self.elements
            .iter()
            .filter_map(|e| match &e.kind {
                ElementKind::VoltageSource(w) | ElementKind::CurrentSource(w) => w.f_max(),
                _ => None,
            })
            .reduce(f64::max)
    }
}

fn canonical_node(name: &str) -> String {
    if name.eq_ignore_ascii_case("gnd") {
        "0".to_string()
    } else {
        name.to_string()
    }
}

/// Parses a number with an optional SI suffix
/// (`f p n u m k meg g t`, case-insensitive).
pub fn parse_value(token: &str) -> Option<f64> {
    let lower = token.to_ascii_lowercase();
    let split = lower
        .char_indices()
        .find(|(i, c)| {
            c.is_ascii_alphabetic() && !(*c == 'e' && lower[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+'))
        })
        .map(|(i, _)| i)
        .unwrap_or(lower.len());
    let (num, suffix) = lower.split_at(split);
    let base: f64 = num.parse().ok()?;
    let scale = match suffix {
        "" => 1.0,
        "f" => 1e-15,
        "p" => 1e-12,
        "n" => 1e-9,
        "u" => 1e-6,
        "m" => 1e-3,
        "k" => 1e3,
        "meg" => 1e6,
        "g" => 1e9,
        "t" => 1e12,
        _ => return None,
    };
    let v = base * scale;
    v.is_finite().then_some(v)
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

const KINDS: [&str; 8] = ["DD", "R", "L", "C", "V", "I", "D", "P"];

fn kind_of(token: &str) -> Option<&'static str> {
    let upper = token.to_ascii_uppercase();
    KINDS.iter().copied().find(|k| upper.starts_with(k))
}

fn value_at(tokens: &[&str], i: usize, line: usize, what: &str) -> Result<f64> {
    let t = tokens
        .get(i)
        .ok_or_else(|| perr(line, format!("missing {what}")))?;
    parse_value(t).ok_or_else(|| perr(line, format!("bad {what} '{t}'")))
}

fn parse_waveform(tokens: &[&str], line: usize) -> Result<Waveform> {
    let kind = tokens
        .first()
        .ok_or_else(|| perr(line, "missing source waveform"))?
        .to_ascii_lowercase();
    let w = match kind.as_str() {
        "dc" => Waveform::Dc(value_at(tokens, 1, line, "dc value")?),
        "sine" | "sin" => Waveform::Sine {
            freq: value_at(tokens, 1, line, "frequency")?,
            amp: value_at(tokens, 2, line, "amplitude")?,
            phase: if tokens.len() > 3 {
                value_at(tokens, 3, line, "phase")?.to_radians()
            } else {
                0.0
            },
        },
        "gauss" => {
            let f0 = value_at(tokens, 1, line, "f0")?;
            let fbw = value_at(tokens, 2, line, "bandwidth")?;
            let amp = value_at(tokens, 3, line, "amplitude")?;
            if !(fbw > 0.0) {
                return Err(perr(line, "gaussian bandwidth must be positive"));
            }
            let mut w = Waveform::modulated_gaussian(f0, fbw, amp);
            if tokens.len() > 4 {
                if let Waveform::ModulatedGaussian { delay, .. } = &mut w {
                    *delay = value_at(tokens, 4, line, "delay")?;
                }
            }
            w
        }
        "step" => Waveform::Step {
            amp: value_at(tokens, 1, line, "amplitude")?,
            t0: if tokens.len() > 2 {
                value_at(tokens, 2, line, "step time")?
            } else {
                0.0
            },
        },
        other => return Err(perr(line, format!("unknown waveform '{other}'"))),
    };
    let expected = match w {
        Waveform::Dc(_) => 2..=2,
        Waveform::Sine { .. } => 3..=4,
        Waveform::ModulatedGaussian { .. } => 4..=5,
        Waveform::Step { .. } => 2..=3,
    };
    if !expected.contains(&tokens.len()) {
        return Err(perr(line, "unexpected number of waveform arguments"));
    }
    Ok(w)
}

fn key_values<'a>(tokens: &[&'a str], line: usize) -> Result<BTreeMap<String, &'a str>> {
    let mut map = BTreeMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| perr(line, format!("expected key=value, got '{t}'")))?;
        if map.insert(k.to_ascii_lowercase(), v).is_some() {
            return Err(perr(line, format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

struct RawElement {
    line: usize,
    name: String,
    kind: ElementKind,
    pos: String,
    neg: String,
}

fn parse_line(line_no: usize, tokens: &[&str]) -> Result<RawElement> {
    let first = tokens[0];
    let kind = kind_of(first).ok_or_else(|| perr(line_no, format!("unknown element kind '{first}'")))?;
    // explicit form when the first token is a bare kind keyword
    let rest = if first.eq_ignore_ascii_case(kind) {
        &tokens[1..]
    } else {
        tokens
    };
    if rest.len() < 4 {
        return Err(perr(line_no, "element needs a name, two nodes and a value"));
    }
    let (name, pos, neg, args) = (rest[0], rest[1], rest[2], &rest[3..]);
    let positive = |v: f64, what: &str| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(perr(line_no, format!("{what} must be positive")))
        }
    };
    let single = |what: &str| -> Result<f64> {
        if args.len() != 1 {
            return Err(perr(line_no, format!("{what} takes exactly one value")));
        }
        positive(value_at(args, 0, line_no, what)?, what)
    };
    let kind = match kind {
        "R" => ElementKind::Resistor(single("resistance")?),
        "L" => ElementKind::Inductor(single("inductance")?),
        "C" => ElementKind::Capacitor(single("capacitance")?),
        "V" => ElementKind::VoltageSource(parse_waveform(args, line_no)?),
        "I" => ElementKind::CurrentSource(parse_waveform(args, line_no)?),
        "D" => {
            let kv = key_values(args, line_no)?;
            let get = |k: &str| -> Result<f64> {
                let v = kv
                    .get(k)
                    .ok_or_else(|| perr(line_no, format!("diode needs {k}=")))?;
                let v = parse_value(v).ok_or_else(|| perr(line_no, format!("bad {k} '{v}'")))?;
                positive(v, k)
            };
            if kv.keys().any(|k| !["is", "n", "vt"].contains(&k.as_str())) {
                return Err(perr(line_no, "diode accepts is=, n=, vt= only"));
            }
            ElementKind::Diode(DiodeParams {
                is: get("is")?,
                n: get("n")?,
                vt: get("vt")?,
            })
        }
        "P" => {
            let kv = key_values(args, line_no)?;
            let q = kv
                .get("port")
                .filter(|_| kv.len() == 1)
                .ok_or_else(|| perr(line_no, "port element needs exactly port=<q>"))?;
            ElementKind::Port(
                q.parse()
                    .map_err(|_| perr(line_no, format!("bad port id '{q}'")))?,
            )
        }
        "DD" => {
            let kv = key_values(args, line_no)?;
            let f = kv
                .get("file")
                .filter(|_| kv.len() == 1)
                .ok_or_else(|| perr(line_no, "device element needs exactly file=<path>"))?;
            ElementKind::Device(f.to_string())
        }
        _ => unreachable!(),
    };
    Ok(RawElement {
        line: line_no,
        name: name.to_string(),
        kind,
        pos: canonical_node(pos),
        neg: canonical_node(neg),
    })
}

/// Parses and validates a netlist.
pub fn parse_netlist(text: &str) -> Result<Netlist> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let content = line.split(['#', ';']).next().unwrap_or("").trim();
        if content.is_empty() || content.starts_with('*') {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        raw.push(parse_line(i + 1, &tokens)?);
    }
    if raw.is_empty() {
        return Err(perr(0, "netlist has no elements"));
    }

    let mut nodes = vec!["0".to_string()];
    let mut index = BTreeMap::new();
    index.insert("0".to_string(), 0usize);
    let mut degree = vec![0usize];
    let mut names = BTreeMap::new();
    let mut ports = BTreeMap::new();
    let mut elements = Vec::with_capacity(raw.len());
    for r in &raw {
        if let Some(prev) = names.insert(r.name.to_ascii_lowercase(), r.line) {
            return Err(perr(
                r.line,
                format!("duplicate element name '{}' (first on line {prev})", r.name),
            ));
        }
        if r.pos == r.neg {
            return Err(perr(r.line, "element connects a node to itself"));
        }
        if let ElementKind::Port(q) = r.kind {
            if ports.insert(q, r.line).is_some() {
                return Err(perr(r.line, format!("port {q} declared twice")));
            }
        }
        let mut id = |n: &String| {
            *index.entry(n.clone()).or_insert_with(|| {
                nodes.push(n.clone());
                degree.push(0);
                nodes.len() - 1
            })
        };
        let (p, n) = (id(&r.pos), id(&r.neg));
        degree[p] += 1;
        degree[n] += 1;
        elements.push(Element {
            name: r.name.clone(),
            kind: r.kind.clone(),
            pos: p,
            neg: n,
        });
    }
    for (q, (&id, &line)) in ports.iter().enumerate() {
        if id != q {
            return Err(perr(line, format!("port ids must be 0..N-1, found {id}")));
        }
    }
    if degree[0] == 0 {
        return Err(perr(0, "netlist has no ground (node 0) connection"));
    }
    for (k, d) in degree.iter().enumerate().skip(1) {
        if *d < 2 {
            let line = raw
                .iter()
                .find(|r| r.pos == nodes[k] || r.neg == nodes[k])
                .map(|r| r.line)
                .unwrap_or(0);
            return Err(perr(
                line,
                format!("node '{}' is dangling (only one connection)", nodes[k]),
            ));
        }
    }
    // connectivity to ground
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in &elements {
        let (a, b) = (find(&mut parent, e.pos), find(&mut parent, e.neg));
        parent[a] = b;
    }
    for k in 1..nodes.len() {
        if find(&mut parent, k) != find(&mut parent, 0) {
            return Err(perr(
                0,
                format!("node '{}' is not connected to ground", nodes[k]),
            ));
        }
    }
    Ok(Netlist { nodes, elements })
}
