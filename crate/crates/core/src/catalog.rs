//! Flow catalogs: component, command and link declarations plus templates.
//!
//! Manifest syntax, one declaration per line:
//!
//! ```text
//! component CPU_0 tag 0x01
//! cmd wr_req 0x40
//! link CPU_0 -> Cache_0 fields Val:1 Cmd:8 Tag:8 Sid:8 Addr:32 Data:32
//! status Cache_0 miss snp_miss
//! flow flows/mem_write.flow
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::flowspec::{clean, is_ident, parse_flow, LineCtx, ParseError};
use crate::lpn::{EventLabel, Lpn, TransitionId};
use crate::trace::MessageEncoding;
use crate::template::{format_binding, Binding, FlowTemplate, TemplateError};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{0}")]
    Parse(#[from] ParseError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("flow `{flow}` uses undeclared component `{component}`")]
    UndeclaredComponent { flow: String, component: String },
    #[error("flow `{flow}` emits on undeclared link {src} -> {dest}")]
    DanglingLink { flow: String, src: String, dest: String },
    #[error("flow `{flow}` uses undeclared command `{cmd}`")]
    UndeclaredCommand { flow: String, cmd: String },
    #[error("flow `{flow}` refers to undeclared status signal `{signal}`")]
    UndeclaredStatus { flow: String, signal: String },
    #[error("duplicate template name `{0}`")]
    DuplicateTemplate(String),
    #[error("duplicate declaration of `{0}`")]
    Duplicate(String),
    #[error("command `{cmd}` code {code:#x} does not fit the {width}-bit Cmd field of {link}")]
    CommandTooWide {
        cmd: String,
        code: u64,
        width: usize,
        link: String,
    },
    #[error("commands `{a}` and `{b}` share an encoding on {link}")]
    CommandClash { a: String, b: String, link: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum FieldKind {
    Val,
    Cmd,
    Tag,
    Sid,
    Addr,
    Data,
}

impl FieldKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Val" => FieldKind::Val,
            "Cmd" => FieldKind::Cmd,
            "Tag" => FieldKind::Tag,
            "Sid" => FieldKind::Sid,
            "Addr" => FieldKind::Addr,
            "Data" => FieldKind::Data,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Val => "Val",
            FieldKind::Cmd => "Cmd",
            FieldKind::Tag => "Tag",
            FieldKind::Sid => "Sid",
            FieldKind::Addr => "Addr",
            FieldKind::Data => "Data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub name: String,
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDecl {
    pub src: String,
    pub dest: String,
    /// Fields from bit 0 upward, in declaration order.
    pub fields: Vec<(FieldKind, usize)>,
}

impl LinkDecl {
    pub fn name(&self) -> String {
        format!("{}->{}", self.src, self.dest)
    }

    pub fn width(&self) -> usize {
        self.fields.iter().map(|(_, w)| w).sum()
    }

    /// Bit offset and width of `kind`, if the link carries it.
    pub fn field(&self, kind: FieldKind) -> Option<(usize, usize)> {
        let mut off = 0;
        for &(k, w) in &self.fields {
            if k == kind {
                return Some((off, w));
            }
            off += w;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusDecl {
    pub component: String,
    pub signals: Vec<String>,
}

impl StatusDecl {
    pub fn name(&self) -> String {
        format!("{}.status", self.component)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub components: Vec<Component>,
    pub commands: BTreeMap<String, u64>,
    pub links: Vec<LinkDecl>,
    pub status: Vec<StatusDecl>,
    pub templates: Vec<FlowTemplate>,
}

/// One concrete flow: a template under one legal binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcreteFlow {
    pub template: String,
    pub binding: Binding,
    pub lpn: Lpn,
}

impl ConcreteFlow {
    /// `template[K=v,...]`, or the bare template name without parameters.
    pub fn id(&self) -> String {
        if self.binding.is_empty() {
            self.template.clone()
        } else {
            format!("{}[{}]", self.template, format_binding(&self.binding))
        }
    }
}

const BUNDLED_MANIFEST: &str = include_str!("../catalog/soc.catalog");
const BUNDLED_FLOWS: &[(&str, &str)] = &[
    ("flows/mem_write.flow", include_str!("../catalog/flows/mem_write.flow")),
    ("flows/mem_read.flow", include_str!("../catalog/flows/mem_read.flow")),
    ("flows/cpu_io.flow", include_str!("../catalog/flows/cpu_io.flow")),
    ("flows/write_back.flow", include_str!("../catalog/flows/write_back.flow")),
    ("flows/cpu_power.flow", include_str!("../catalog/flows/cpu_power.flow")),
    ("flows/up_read.flow", include_str!("../catalog/flows/up_read.flow")),
    ("flows/up_write.flow", include_str!("../catalog/flows/up_write.flow")),
];

impl Catalog {
    /// The SoC protocol suite shipped with the crate.
    pub fn bundled() -> Catalog {
        let mut cat = Catalog::default();
        cat.apply_manifest("soc.catalog", BUNDLED_MANIFEST, &mut |path| {
            BUNDLED_FLOWS
                .iter()
                .find(|(p, _)| *p == path)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| CatalogError::Io {
                    path: path.to_string(),
                    message: "not bundled".into(),
                })
        })
        .expect("bundled manifest parses");
        cat.validate().expect("bundled catalog is valid");
        cat
    }

    /// Bundled catalog restricted to the named templates.
    pub fn bundled_subset(names: &[&str]) -> Catalog {
        let mut cat = Catalog::bundled();
        cat.templates.retain(|t| names.contains(&t.name.as_str()));
        cat
    }

    /// Parses a manifest from text. Flow files are fetched through `read`.
    pub fn from_manifest_text(
        source: &str,
        text: &str,
        read: &mut dyn FnMut(&str) -> Result<String, CatalogError>,
    ) -> Result<Catalog, CatalogError> {
        let mut cat = Catalog::default();
        cat.apply_manifest(source, text, read)?;
        cat.validate()?;
        Ok(cat)
    }

    fn apply_manifest(
        &mut self,
        source: &str,
        text: &str,
        read: &mut dyn FnMut(&str) -> Result<String, CatalogError>,
    ) -> Result<(), CatalogError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = clean(raw);
            if line.is_empty() {
                continue;
            }
            let ctx = LineCtx {
                source,
                line_no: idx + 1,
                line: raw,
            };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "component" => {
                    let name = *words
                        .get(1)
                        .ok_or_else(|| ctx.err_at("component", "missing component name"))?;
                    if !is_ident(name) {
                        return Err(ctx.err_at(name, format!("bad component name `{name}`")).into());
                    }
                    if self.components.iter().any(|c| c.name == name) {
                        return Err(CatalogError::Duplicate(name.to_string()));
                    }
                    let tag = match words.get(2..) {
                        Some(["tag", v]) => parse_int(v).ok_or_else(|| ctx.err_at(v, format!("bad tag `{v}`")))?,
                        Some([]) | None => self.components.len() as u64 + 1,
                        Some(rest) => {
                            return Err(ctx.err_at(rest[0], "expected `tag <code>`").into());
                        }
                    };
                    self.components.push(Component {
                        name: name.to_string(),
                        tag,
                    });
                }
                "cmd" => {
                    let (name, code) = match words.as_slice() {
                        [_, n, c] => (*n, *c),
                        _ => return Err(ctx.err_at("cmd", "expected `cmd <name> <code>`").into()),
                    };
                    let code = parse_int(code).ok_or_else(|| ctx.err_at(code, format!("bad code `{code}`")))?;
                    if self.commands.insert(name.to_string(), code).is_some() {
                        return Err(CatalogError::Duplicate(name.to_string()));
                    }
                }
                "link" => {
                    let (src, dest, fields) = match words.as_slice() {
                        [_, s, "->", d, "fields", fs @ ..] if !fs.is_empty() => (*s, *d, fs),
                        _ => {
                            return Err(ctx
                                .err_at("link", "expected `link <src> -> <dest> fields <F:w> ...`")
                                .into())
                        }
                    };
                    let mut decl = LinkDecl {
                        src: src.into(),
                        dest: dest.into(),
                        fields: vec![],
                    };
                    for f in fields {
                        let (k, w) = f
                            .split_once(':')
                            .ok_or_else(|| ctx.err_at(f, format!("bad field `{f}`")))?;
                        let kind = FieldKind::parse(k).ok_or_else(|| ctx.err_at(f, format!("unknown field `{k}`")))?;
                        let width: usize = w.parse().map_err(|_| ctx.err_at(f, format!("bad width `{w}`")))?;
                        if width == 0 || decl.fields.iter().any(|(k2, _)| *k2 == kind) {
                            return Err(ctx.err_at(f, format!("bad or repeated field `{f}`")).into());
                        }
                        if matches!(kind, FieldKind::Tag | FieldKind::Sid | FieldKind::Cmd) && width > 64 {
                            return Err(ctx.err_at(f, "Cmd/Tag/Sid fields are limited to 64 bits").into());
                        }
                        decl.fields.push((kind, width));
                    }
                    if decl.field(FieldKind::Val) != Some((0, 1)) {
                        return Err(ctx.err_at(fields[0], "links must start with `Val:1`").into());
                    }
                    if decl.field(FieldKind::Cmd).is_none() {
                        return Err(ctx.err_at("fields", "links need a Cmd field").into());
                    }
                    if self.links.iter().any(|l| l.src == decl.src && l.dest == decl.dest) {
                        return Err(CatalogError::Duplicate(decl.name()));
                    }
                    self.links.push(decl);
                }
                "status" => {
                    let (comp, signals) = match words.as_slice() {
                        [_, c, sigs @ ..] if !sigs.is_empty() => (*c, sigs),
                        _ => {
                            return Err(ctx.err_at("status", "expected `status <component> <signal>...`").into())
                        }
                    };
                    if self.status.iter().any(|s| s.component == comp) {
                        return Err(CatalogError::Duplicate(format!("{comp}.status")));
                    }
                    self.status.push(StatusDecl {
                        component: comp.into(),
                        signals: signals.iter().map(|s| s.to_string()).collect(),
                    });
                }
                "flow" => {
                    let path = *words.get(1).ok_or_else(|| ctx.err_at("flow", "missing flow file"))?;
                    let text = read(path)?;
                    self.add_template(parse_flow(path, &text)?)?;
                }
                other => {
                    return Err(ctx.err_at(other, format!("unknown declaration `{other}`")).into());
                }
            }
        }
        Ok(())
    }

    pub fn add_template(&mut self, t: FlowTemplate) -> Result<(), CatalogError> {
        if self.templates.iter().any(|x| x.name == t.name) {
            return Err(CatalogError::DuplicateTemplate(t.name));
        }
        self.templates.push(t);
        Ok(())
    }

    pub fn link_index(&self, src: &str, dest: &str) -> Option<usize> {
        self.links.iter().position(|l| l.src == src && l.dest == dest)
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Checks every concrete flow against the declarations.
    pub fn validate(&self) -> Result<(), CatalogError> {
        for flow in self.expand()? {
            let id = flow.id();
            for t in flow.lpn.transitions() {
                let l = &t.label;
                for c in [&l.src, &l.dest] {
                    if self.component(c).is_none() {
                        return Err(CatalogError::UndeclaredComponent {
                            flow: id.clone(),
                            component: c.clone(),
                        });
                    }
                }
                let Some(li) = self.link_index(&l.src, &l.dest) else {
                    return Err(CatalogError::DanglingLink {
                        flow: id.clone(),
                        src: l.src.clone(),
                        dest: l.dest.clone(),
                    });
                };
                let code = *self.commands.get(&l.cmd).ok_or_else(|| CatalogError::UndeclaredCommand {
                    flow: id.clone(),
                    cmd: l.cmd.clone(),
                })?;
                let (_, width) = self.links[li].field(FieldKind::Cmd).expect("checked at parse");
                if width < 64 && code >> width != 0 {
                    return Err(CatalogError::CommandTooWide {
                        cmd: l.cmd.clone(),
                        code,
                        width,
                        link: self.links[li].name(),
                    });
                }
                if let Some(s) = &t.status {
                    let ok = self
                        .status
                        .iter()
                        .any(|d| d.component == s.component && d.signals.contains(&s.signal));
                    if !ok {
                        return Err(CatalogError::UndeclaredStatus {
                            flow: id.clone(),
                            signal: s.to_string(),
                        });
                    }
                }
            }
        }
        // Per-link command encodings must be distinct.
        for (li, cmds) in self.link_commands().iter().enumerate() {
            let mut seen: HashMap<u64, &str> = HashMap::new();
            for c in cmds {
                let code = self.commands[c];
                if let Some(prev) = seen.insert(code, c) {
                    return Err(CatalogError::CommandClash {
                        a: prev.to_string(),
                        b: c.clone(),
                        link: self.links[li].name(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Commands carried by each link across all concrete flows.
    pub fn link_commands(&self) -> Vec<BTreeSet<String>> {
        let mut out = vec![BTreeSet::new(); self.links.len()];
        if let Ok(flows) = self.expand() {
            for f in flows {
                for t in f.lpn.transitions() {
                    if let Some(li) = self.link_index(&t.label.src, &t.label.dest) {
                        out[li].insert(t.label.cmd.clone());
                    }
                }
            }
        }
        out
    }

    /// Every legal instantiation, ordered by template name then binding.
    pub fn expand(&self) -> Result<Vec<ConcreteFlow>, CatalogError> {
        let mut templates: Vec<&FlowTemplate> = self.templates.iter().collect();
        templates.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = Vec::new();
        for t in templates {
            for b in t.legal_bindings() {
                let lpn = t.instantiate(&b)?;
                out.push(ConcreteFlow {
                    template: t.name.clone(),
                    binding: b,
                    lpn,
                });
            }
        }
        Ok(out)
    }
}

pub(crate) fn parse_int(s: &str) -> Option<u64> {
    if let Some(h) = s.strip_prefix("0x") {
        u64::from_str_radix(&h.replace('_', ""), 16).ok()
    } else if let Some(b) = s.strip_prefix("0b") {
        u64::from_str_radix(&b.replace('_', ""), 2).ok()
    } else {
        s.parse().ok()
    }
}

/// Loads manifests (`*.catalog`) and standalone flow files (`*.flow`) into
/// one catalog. Flow paths inside a manifest are relative to the manifest.
pub fn load_catalog<P: AsRef<Path>>(paths: &[P]) -> Result<Catalog, CatalogError> {
    let mut cat = Catalog::default();
    for p in paths {
        let p = p.as_ref();
        let text = read_file(p)?;
        if p.extension().and_then(|e| e.to_str()) == Some("flow") {
            let src = p.display().to_string();
            cat.add_template(parse_flow(&src, &text)?)?;
        } else {
            let base: PathBuf = p.parent().map(Path::to_path_buf).unwrap_or_default();
            cat.apply_manifest(&p.display().to_string(), &text, &mut |rel| read_file(&base.join(rel)))?;
        }
    }
    cat.validate()?;
    Ok(cat)
}

fn read_file(p: &Path) -> Result<String, CatalogError> {
    fs::read_to_string(p).map_err(|e| CatalogError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    })
}

pub type FlowId = usize;
pub type EventId = usize;
pub type LinkId = usize;
pub type StatusId = usize;

/// A concrete flow compiled against the catalog's link and event tables.
#[derive(Debug, Clone)]
pub struct FlowEntry {
    pub flow: ConcreteFlow,
    pub name: String,
    /// Source component of the flow's start events.
    pub initiator: String,
    pub initiator_tag: u64,
    pub events: Vec<EventId>,
    pub links: Vec<LinkId>,
    pub status: Vec<Option<StatusId>>,
}

impl FlowEntry {
    pub fn lpn(&self) -> &Lpn {
        &self.flow.lpn
    }
}

/// Expanded catalog with interned events; the input to analysis.
#[derive(Debug, Clone)]
pub struct FlowSet {
    pub catalog: Catalog,
    pub flows: Vec<FlowEntry>,
    pub events: Vec<EventLabel>,
    event_index: HashMap<EventLabel, EventId>,
    pub event_link: Vec<LinkId>,
    /// `(component, signal)` for every declared status signal.
    pub status_signals: Vec<(String, String)>,
    /// Concrete flows containing each event.
    pub event_flows: Vec<BTreeSet<FlowId>>,
    /// Events carried by each message link, in id order.
    pub link_events: Vec<Vec<EventId>>,
    pub enc: MessageEncoding,
}

impl FlowSet {
    pub fn new(catalog: Catalog) -> Result<FlowSet, CatalogError> {
        catalog.validate()?;
        let expanded = catalog.expand()?;
        let status_signals: Vec<(String, String)> = catalog
            .status
            .iter()
            .flat_map(|d| d.signals.iter().map(move |s| (d.component.clone(), s.clone())))
            .collect();
        let mut events = Vec::new();
        let mut event_index = HashMap::new();
        let mut event_link = Vec::new();
        let mut flows = Vec::new();
        let mut event_flows: Vec<BTreeSet<FlowId>> = Vec::new();
        for (fid, flow) in expanded.into_iter().enumerate() {
            let lpn = &flow.lpn;
            let mut ev = Vec::new();
            let mut links = Vec::new();
            let mut status = Vec::new();
            for t in lpn.transitions() {
                let li = catalog.link_index(&t.label.src, &t.label.dest).expect("validated");
                let id = *event_index.entry(t.label.clone()).or_insert_with(|| {
                    events.push(t.label.clone());
                    event_link.push(li);
                    event_flows.push(BTreeSet::new());
                    events.len() - 1
                });
                event_flows[id].insert(fid);
                ev.push(id);
                links.push(li);
                status.push(t.status.as_ref().map(|s| {
                    status_signals
                        .iter()
                        .position(|(c, n)| c == &s.component && n == &s.signal)
                        .expect("validated")
                }));
            }
            let initiator = lpn
                .enabled(lpn.initial())
                .first()
                .map(|&t| lpn.transition(t).label.src.clone())
                .unwrap_or_default();
            let initiator_tag = catalog.component(&initiator).map(|c| c.tag).unwrap_or(0);
            flows.push(FlowEntry {
                name: flow.id(),
                flow,
                initiator,
                initiator_tag,
                events: ev,
                links,
                status,
            });
        }
        let mut link_events = vec![Vec::new(); catalog.links.len()];
        for (e, &l) in event_link.iter().enumerate() {
            link_events[l].push(e);
        }
        let enc = MessageEncoding::from_catalog(&catalog);
        Ok(FlowSet {
            link_events,
            enc,
            catalog,
            flows,
            events,
            event_index,
            event_link,
            status_signals,
            event_flows,
        })
    }

    pub fn bundled() -> FlowSet {
        FlowSet::new(Catalog::bundled()).expect("bundled catalog is valid")
    }

    pub fn event_id(&self, e: &EventLabel) -> Option<EventId> {
        self.event_index.get(e).copied()
    }

    pub fn flow_by_name(&self, name: &str) -> Option<FlowId> {
        self.flows.iter().position(|f| f.name == name)
    }

    /// Transitions of flow `f` carrying event `e`.
    pub fn transitions_with(&self, f: FlowId, e: EventId) -> impl Iterator<Item = TransitionId> + '_ {
        self.flows[f]
            .events
            .iter()
            .enumerate()
            .filter(move |(_, &x)| x == e)
            .map(|(t, _)| t)
    }

    /// Number of distinct initiating components among flows using `e`.
    pub fn initiators_of(&self, e: EventId) -> BTreeSet<&str> {
        self.event_flows[e]
            .iter()
            .map(|&f| self.flows[f].initiator.as_str())
            .collect()
    }

    /// An event is shared when flows started by different components use it.
    pub fn is_shared(&self, e: EventId) -> bool {
        self.initiators_of(e).len() > 1
    }

    pub fn status_index(&self, component: &str, signal: &str) -> Option<StatusId> {
        self.status_signals
            .iter()
            .position(|(c, s)| c == component && s == signal)
    }
}
