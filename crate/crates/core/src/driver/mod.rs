//! Allocation-trace programs in the angle-bracket directive format.
//!
//! ```text
//! <malloc 32 a>
//! <calloc 4 8 b>
//! <realloc a 64 c>
//! <free b>
//! <fst 16>
//! <snd 16>
//! ```
//!
//! Lines starting with `#` are comments, except for the two probe forms
//! `#X-RECORD <skip> <id>` and `#X-CHECK <x> <y> <distance>`, which bind an
//! upcoming allocation to a name and require a distance between two names.

mod exec;
mod external;

use std::fmt;

use rustc_hash::FxHashSet;
use thiserror::Error;

pub(crate) use exec::signed_distance;
pub use exec::{execute, CheckOutcome, DriverResult, ExecError, ExecFailure, Execution, Machine};
pub use external::{parse_output, run_external, ExternalError, ExternalOutput, DEFAULT_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Directive {
    Malloc {
        size: u64,
        id: String,
    },
    Calloc {
        nmemb: u64,
        size: u64,
        id: String,
    },
    Free {
        id: String,
    },
    Realloc {
        old_id: String,
        size: u64,
        id: String,
    },
    Fst {
        size: u64,
    },
    Snd {
        size: u64,
    },
}

impl Directive {
    /// Id this directive makes live, if any.
    pub fn defines(&self) -> Option<&str> {
        match self {
            Directive::Malloc { id, .. }
            | Directive::Calloc { id, .. }
            | Directive::Realloc { id, .. } => Some(id),
            _ => None,
        }
    }

    /// Whether executing this directive performs an allocation.
    pub fn allocates(&self) -> bool {
        !matches!(self, Directive::Free { .. })
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Malloc { size, id } => write!(f, "<malloc {size} {id}>"),
            Directive::Calloc { nmemb, size, id } => write!(f, "<calloc {nmemb} {size} {id}>"),
            Directive::Free { id } => write!(f, "<free {id}>"),
            Directive::Realloc { old_id, size, id } => write!(f, "<realloc {old_id} {size} {id}>"),
            Directive::Fst { size } => write!(f, "<fst {size}>"),
            Directive::Snd { size } => write!(f, "<snd {size}>"),
        }
    }
}

/// Address capture and distance requirement annotations.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Probe {
    /// Bind the allocation `skip` allocations after this point to `id`.
    Record { skip: u64, id: String },
    /// Require `addr(x) - addr(y) == distance` after execution.
    Check { x: String, y: String, distance: i64 },
}

impl fmt::Display for Probe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Probe::Record { skip, id } => write!(f, "#X-RECORD {skip} {id}"),
            Probe::Check { x, y, distance } => write!(f, "#X-CHECK {x} {y} {distance}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}, line {}", self.message, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseErrors(pub Vec<ParseError>);

impl fmt::Display for ParseErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Whether the fst/snd pair is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Markers {
    Required,
    Optional,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DriverProgram {
    directives: Vec<Directive>,
    /// Probes with the directive index they precede.
    probes: Vec<(usize, Probe)>,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id
            .chars()
            .any(|c| c.is_whitespace() || c == '<' || c == '>')
}

/// Incremental validator shared by the text parser and programmatic builders.
struct Validator {
    markers: Markers,
    live: FxHashSet<String>,
    records: FxHashSet<String>,
    checks: Vec<(usize, String, String)>,
    fst_seen: bool,
    snd_seen: bool,
    errors: Vec<ParseError>,
}

impl Validator {
    fn new(markers: Markers) -> Self {
        Self {
            markers,
            live: FxHashSet::default(),
            records: FxHashSet::default(),
            checks: Vec::new(),
            fst_seen: false,
            snd_seen: false,
            errors: Vec::new(),
        }
    }

    fn err(&mut self, line: usize, message: impl Into<String>) {
        self.errors.push(ParseError {
            line,
            message: message.into(),
        });
    }

    fn directive(&mut self, line: usize, d: &Directive) {
        let size_ok = match d {
            Directive::Malloc { size, .. }
            | Directive::Realloc { size, .. }
            | Directive::Fst { size }
            | Directive::Snd { size } => *size >= 1,
            Directive::Calloc { nmemb, size, .. } => *nmemb >= 1 && *size >= 1,
            Directive::Free { .. } => true,
        };
        if !size_ok {
            self.err(line, "sizes must be at least 1");
        }
        match d {
            Directive::Free { id } => {
                if !self.live.remove(id) {
                    self.err(line, format!("unknown id `{id}`"));
                }
            }
            Directive::Realloc { old_id, .. } => {
                if !self.live.remove(old_id) {
                    self.err(line, format!("unknown id `{old_id}`"));
                }
            }
            Directive::Fst { .. } => {
                if self.fst_seen {
                    self.err(line, "duplicate fst");
                }
                self.fst_seen = true;
            }
            Directive::Snd { .. } => {
                if self.snd_seen {
                    self.err(line, "duplicate snd");
                } else if !self.fst_seen && self.markers == Markers::Required {
                    self.err(line, "snd before fst");
                }
                self.snd_seen = true;
            }
            _ => {}
        }
        if let Some(id) = d.defines() {
            if !valid_id(id) {
                self.err(line, format!("invalid id `{id}`"));
            } else if !self.live.insert(id.to_string()) {
                self.err(line, format!("id `{id}` redefined while live"));
            }
        }
    }

    fn probe(&mut self, line: usize, p: &Probe) {
        match p {
            Probe::Record { id, .. } => {
                if !valid_id(id) {
                    self.err(line, format!("invalid record id `{id}`"));
                } else if !self.records.insert(id.clone()) {
                    self.err(line, format!("record id `{id}` defined twice"));
                }
            }
            Probe::Check { x, y, .. } => self.checks.push((line, x.clone(), y.clone())),
        }
    }

    fn finish(mut self, last_line: usize) -> Result<(), ParseErrors> {
        for (line, x, y) in std::mem::take(&mut self.checks) {
            for id in [x, y] {
                if !self.records.contains(&id) {
                    self.err(line, format!("check references undefined record `{id}`"));
                }
            }
        }
        if self.markers == Markers::Required {
            if !self.fst_seen {
                self.err(last_line, "missing fst");
            }
            if !self.snd_seen {
                self.err(last_line, "missing snd");
            }
        }
        if self.errors.is_empty() {
            Ok(())
        } else {
            self.errors.sort_by_key(|e| e.line);
            Err(ParseErrors(self.errors))
        }
    }
}

fn parse_u64(token: &str, what: &str) -> Result<u64, String> {
    token
        .parse::<u64>()
        .map_err(|_| format!("malformed {what} `{token}`"))
}

fn parse_directive(inner: &str) -> Result<Directive, String> {
    let fields: Vec<&str> = inner.split_whitespace().collect();
    let arity = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(format!(
                "`{}` takes {} fields, found {}",
                fields[0],
                n - 1,
                fields.len() - 1
            ))
        }
    };
    let Some(&op) = fields.first() else {
        return Err("empty directive".into());
    };
    let d = match op {
        "malloc" => {
            arity(3)?;
            Directive::Malloc {
                size: parse_u64(fields[1], "size")?,
                id: fields[2].to_string(),
            }
        }
        "calloc" => {
            arity(4)?;
            Directive::Calloc {
                nmemb: parse_u64(fields[1], "count")?,
                size: parse_u64(fields[2], "size")?,
                id: fields[3].to_string(),
            }
        }
        "free" => {
            arity(2)?;
            Directive::Free {
                id: fields[1].to_string(),
            }
        }
        "realloc" => {
            arity(4)?;
            Directive::Realloc {
                old_id: fields[1].to_string(),
                size: parse_u64(fields[2], "size")?,
                id: fields[3].to_string(),
            }
        }
        "fst" => {
            arity(2)?;
            Directive::Fst {
                size: parse_u64(fields[1], "size")?,
            }
        }
        "snd" => {
            arity(2)?;
            Directive::Snd {
                size: parse_u64(fields[1], "size")?,
            }
        }
        other => return Err(format!("unknown directive `{other}`")),
    };
    Ok(d)
}

fn parse_probe(line: &str) -> Option<Result<Probe, String>> {
    let mut fields = line.split_whitespace();
    let head = fields.next()?;
    let rest: Vec<&str> = fields.collect();
    match head {
        "#X-RECORD" => Some(match rest.as_slice() {
            [skip, id] => parse_u64(skip, "record offset").map(|skip| Probe::Record {
                skip,
                id: id.to_string(),
            }),
            _ => Err("`#X-RECORD` takes an offset and an id".into()),
        }),
        "#X-CHECK" => Some(match rest.as_slice() {
            [x, y, d] => d
                .parse::<i64>()
                .map_err(|_| format!("malformed distance `{d}`"))
                .map(|distance| Probe::Check {
                    x: x.to_string(),
                    y: y.to_string(),
                    distance,
                }),
            _ => Err("`#X-CHECK` takes two ids and a distance".into()),
        }),
        _ => None,
    }
}

impl DriverProgram {
    /// Parse a program that must contain exactly one fst followed by one snd.
    pub fn parse(text: &str) -> Result<Self, ParseErrors> {
        Self::parse_with(text, Markers::Required)
    }

    /// Parse a trace in which the fst/snd markers are optional, such as a
    /// captured starting state.
    pub fn parse_trace(text: &str) -> Result<Self, ParseErrors> {
        Self::parse_with(text, Markers::Optional)
    }

    pub fn parse_with(text: &str, markers: Markers) -> Result<Self, ParseErrors> {
        let mut v = Validator::new(markers);
        let mut program = DriverProgram::default();
        let mut last_line = 1;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            last_line = line_no;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                match parse_probe(line) {
                    Some(Ok(p)) => {
                        v.probe(line_no, &p);
                        program.probes.push((program.directives.len(), p));
                    }
                    Some(Err(msg)) => v.err(line_no, msg),
                    None => {}
                }
                continue;
            }
            let Some(inner) = line.strip_prefix('<').and_then(|l| l.strip_suffix('>')) else {
                v.err(line_no, "directive must be wrapped in angle brackets");
                continue;
            };
            match parse_directive(inner) {
                Ok(d) => {
                    v.directive(line_no, &d);
                    program.directives.push(d);
                }
                Err(msg) => v.err(line_no, msg),
            }
        }
        v.finish(last_line)?;
        Ok(program)
    }

    /// Validate a programmatically built program. Error line numbers are
    /// 1-based directive positions.
    pub fn from_parts(
        directives: Vec<Directive>,
        probes: Vec<(usize, Probe)>,
        markers: Markers,
    ) -> Result<Self, ParseErrors> {
        let mut v = Validator::new(markers);
        let mut pi = 0;
        for (i, d) in directives.iter().enumerate() {
            while pi < probes.len() && probes[pi].0 <= i {
                v.probe(i + 1, &probes[pi].1);
                pi += 1;
            }
            v.directive(i + 1, d);
        }
        for (_, p) in &probes[pi..] {
            v.probe(directives.len().max(1), p);
        }
        v.finish(directives.len().max(1))?;
        let mut probes = probes;
        probes.sort_by_key(|(pos, _)| *pos);
        Ok(Self { directives, probes })
    }

    /// Build without validation; callers guarantee well-formedness.
    pub(crate) fn from_parts_unchecked(
        directives: Vec<Directive>,
        probes: Vec<(usize, Probe)>,
    ) -> Self {
        Self { directives, probes }
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    pub fn probes(&self) -> &[(usize, Probe)] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.directives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    /// Canonical text: one directive or probe per line, single spaces.
    pub fn serialize(&self) -> String {
        let mut out = String::with_capacity(self.directives.len() * 16);
        self.write_to(&mut out).expect("writing to a String");
        out
    }

    pub fn write_to(&self, out: &mut impl fmt::Write) -> fmt::Result {
        let mut probes = self.probes.iter().peekable();
        for (i, d) in self.directives.iter().enumerate() {
            while let Some((_, p)) = probes.next_if(|(pos, _)| *pos <= i) {
                writeln!(out, "{p}")?;
            }
            writeln!(out, "{d}")?;
        }
        for (_, p) in probes {
            writeln!(out, "{p}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program_parses() {
        let p = DriverProgram::parse("<malloc 32 a>\n<fst 16>\n<free a>\n<snd 16>").unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(
            p.directives()[0],
            Directive::Malloc {
                size: 32,
                id: "a".into()
            }
        );
    }

    #[test]
    fn calloc_fields() {
        let p = DriverProgram::parse_trace("<calloc 4 8 b>").unwrap();
        assert_eq!(
            p.directives(),
            &[Directive::Calloc {
                nmemb: 4,
                size: 8,
                id: "b".into()
            }]
        );
    }

    #[test]
    fn unknown_id_reports_its_line() {
        let err = DriverProgram::parse_trace("<free zz>").unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert_eq!(err.to_string(), "unknown id `zz`, line 1");
    }

    #[test]
    fn marker_rules() {
        let msg = |t: &str| DriverProgram::parse(t).unwrap_err().to_string();
        assert!(msg("<snd 8>\n<fst 8>").contains("snd before fst"));
        assert!(msg("<fst 8>\n<fst 8>\n<snd 8>").contains("duplicate fst"));
        assert!(msg("<fst 8>").contains("missing snd"));
        assert!(DriverProgram::parse_trace("<malloc 8 a>").is_ok());
    }

    #[test]
    fn malformed_lines_are_all_reported() {
        let err = DriverProgram::parse_trace(
            "<malloc 8>\nmalloc 8 a\n<jump 3>\n<malloc 0 z>\n<malloc 8 a>\n<malloc 8 a>",
        )
        .unwrap_err();
        let lines: Vec<usize> = err.0.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![1, 2, 3, 4, 6]);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let p = DriverProgram::parse("# setup\n\n  <fst 8>  \n<snd   8>\n").unwrap();
        assert_eq!(p.serialize(), "<fst 8>\n<snd 8>\n");
    }

    #[test]
    fn realloc_may_keep_its_id() {
        let p = DriverProgram::parse_trace("<malloc 8 a>\n<realloc a 16 a>\n<free a>").unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let text = "<malloc 32 a>\n<fst 16>\n<free a>\n<snd 16>\n";
        let p = DriverProgram::parse(text).unwrap();
        assert_eq!(p.serialize(), text);
        assert_eq!(DriverProgram::parse(&p.serialize()).unwrap(), p);
    }

    #[test]
    fn probes_round_trip() {
        let text = "#X-RECORD 0 x\n<malloc 8 a>\n#X-RECORD 1 y\n<malloc 8 b>\n<malloc 8 c>\n#X-CHECK x y -16\n";
        let p = DriverProgram::parse_trace(text).unwrap();
        assert_eq!(p.probes().len(), 3);
        assert_eq!(p.serialize(), text);
        let err = DriverProgram::parse_trace("#X-CHECK x y 8\n").unwrap_err();
        assert!(err.to_string().contains("undefined record"));
    }
}
