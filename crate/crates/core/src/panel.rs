//! Company panel data: indicator registry, per-company annual records,
//! delimiter-separated ingestion and structural validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Short indicator code such as `AT` or `REVT`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndicatorId(String);

impl IndicatorId {
    pub fn new(code: impl Into<String>) -> Self {
        Self(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IndicatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for IndicatorId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Asset code; every growth computation is driven by it.
pub const ASSETS: &str = "AT";
pub const LIABILITIES: &str = "LT";
pub const NET_INCOME: &str = "NI";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorGroup {
    Financial,
    Macro,
}

/// Scaling applied by the log-transform step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    /// Natural log; the value must be strictly positive.
    Log,
    /// `sign(x)·ln(|x|+1)`.
    LinLog,
    Identity,
}

impl Transform {
    pub fn apply(self, x: f64) -> Option<f64> {
        match self {
            Transform::Log => (x > 0.0).then(|| x.ln()),
            Transform::LinLog => Some(crate::preprocess::linlog(x)),
            Transform::Identity => Some(x),
        }
    }

    pub fn invert(self, z: f64) -> f64 {
        match self {
            Transform::Log => z.exp(),
            Transform::LinLog => crate::preprocess::linlog_inverse(z),
            Transform::Identity => z,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSpec {
    pub id: IndicatorId,
    pub group: IndicatorGroup,
    /// Monetary values are inflation adjusted.
    pub monetary: bool,
    pub transform: Transform,
}

impl IndicatorSpec {
    pub fn financial(code: &str, monetary: bool, transform: Transform) -> Self {
        Self {
            id: IndicatorId::new(code),
            group: IndicatorGroup::Financial,
            monetary,
            transform,
        }
    }

    pub fn macro_series(code: &str, monetary: bool, transform: Transform) -> Self {
        Self {
            id: IndicatorId::new(code),
            group: IndicatorGroup::Macro,
            monetary,
            transform,
        }
    }
}

/// Ordered list of indicators known to a panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    specs: Vec<IndicatorSpec>,
}

impl Registry {
    pub fn new(specs: Vec<IndicatorSpec>) -> Result<Self, PanelError> {
        let mut seen = BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.id.clone()) {
                return Err(PanelError::Schema(format!("indicator {} registered twice", s.id)));
            }
        }
        Ok(Self { specs })
    }

    /// Financial statement codes. Strictly positive balance-sheet and income
    /// items use `ln`; items that may be zero, negative or a head count use
    /// the linear-log transform.
    pub fn financial_defaults() -> Vec<IndicatorSpec> {
        use Transform::*;
        [
            ("EMP", false, LinLog),
            ("AT", true, Log),
            ("ACO", true, LinLog),
            ("LT", true, Log),
            ("DLTT", true, LinLog),
            ("DD1", true, LinLog),
            ("CSTK", true, LinLog),
            ("CEQ", true, LinLog),
            ("REVT", true, Log),
            ("NI", true, LinLog),
            ("XSGA", true, LinLog),
            ("RE", true, LinLog),
            ("EBITDA", true, LinLog),
            ("COGS", true, Log),
            ("TXT", true, LinLog),
            ("XINT", true, LinLog),
            ("CH", true, LinLog),
        ]
        .into_iter()
        .map(|(c, m, t)| IndicatorSpec::financial(c, m, t))
        .collect()
    }

    /// US macro series. Current-dollar aggregates are monetary; percentages
    /// and ratios are used as-is.
    pub fn macro_defaults() -> Vec<IndicatorSpec> {
        use Transform::*;
        [
            ("MERCH_EXPORTS", true, Log),
            ("DOMESTIC_CREDIT", true, Log),
            ("GDP", true, Log),
            ("MERCH_IMPORTS", true, Log),
            ("EXPORTS_GDP", false, Identity),
            ("INFLATION", false, Identity),
            ("STOCK_TURNOVER", false, Identity),
            ("BROAD_MONEY_GROWTH", false, Identity),
            ("REVENUE_GDP", false, Identity),
            ("BROAD_MONEY_GDP", false, Identity),
            ("DEPOSIT_RATE", false, Identity),
            ("LENDING_RATE", false, Identity),
            ("GDP_PC_GROWTH", false, Identity),
            ("EXPENSE_GDP", false, Identity),
            ("GDP_GROWTH", false, Identity),
            ("IMPORTS_GDP", false, Identity),
            ("STOCKS_TRADED_GDP", false, Identity),
        ]
        .into_iter()
        .map(|(c, m, t)| IndicatorSpec::macro_series(c, m, t))
        .collect()
    }

    /// Union of the financial and macro defaults.
    pub fn standard() -> Self {
        let mut specs = Self::financial_defaults();
        specs.extend(Self::macro_defaults());
        Self { specs }
    }

    pub fn specs(&self) -> &[IndicatorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, id: &IndicatorId) -> Option<usize> {
        self.specs.iter().position(|s| &s.id == id)
    }

    pub fn index_of_code(&self, code: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.id.as_str() == code)
    }

    pub fn get(&self, id: &IndicatorId) -> Option<&IndicatorSpec> {
        self.specs.iter().find(|s| &s.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &IndicatorId> {
        self.specs.iter().map(|s| &s.id)
    }

    pub fn financial_ids(&self) -> Vec<IndicatorId> {
        self.specs
            .iter()
            .filter(|s| s.group == IndicatorGroup::Financial)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn macro_ids(&self) -> Vec<IndicatorId> {
        self.specs
            .iter()
            .filter(|s| s.group == IndicatorGroup::Macro)
            .map(|s| s.id.clone())
            .collect()
    }

    /// Restriction of the registry to the given codes, in their registry order.
    pub fn restrict<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> Self {
        let keep: BTreeSet<&str> = keep.into_iter().collect();
        Self {
            specs: self.specs.iter().filter(|s| keep.contains(s.id.as_str())).cloned().collect(),
        }
    }
}

/// Per-value provenance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub imputed: bool,
    pub transformed: bool,
}

impl Provenance {
    pub fn is_observed(&self) -> bool {
        !self.imputed
    }
}

/// One company-year. `values` and `flags` are aligned with the panel registry.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanyRecord {
    pub fiscal_year: i32,
    pub sector: Option<String>,
    pub values: Vec<Option<f64>>,
    pub flags: Vec<Provenance>,
}

impl CompanyRecord {
    pub fn new(fiscal_year: i32, sector: Option<String>, values: Vec<Option<f64>>) -> Self {
        let flags = vec![Provenance::default(); values.len()];
        Self {
            fiscal_year,
            sector,
            values,
            flags,
        }
    }

    pub fn value(&self, index: usize) -> Option<f64> {
        self.values.get(index).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompanySeries {
    pub id: String,
    pub records: Vec<CompanyRecord>,
}

impl CompanySeries {
    pub fn sector(&self) -> Option<&str> {
        self.records.iter().rev().find_map(|r| r.sector.as_deref())
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.records.iter().map(|r| r.fiscal_year)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub base_year: Option<i32>,
    pub inflation_adjusted: bool,
    pub transformed: bool,
}

/// Annual records grouped by company id (sorted) and by fiscal year within a company.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanyPanel {
    registry: Registry,
    companies: Vec<CompanySeries>,
    pub meta: PanelMeta,
}

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("integrity error: duplicate record for company {company} year {year}")]
    Duplicate { company: String, year: i32 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CompanyPanel {
    /// Groups loose records into per-company series. Duplicate (company, year)
    /// pairs are rejected.
    pub fn from_records(
        registry: Registry,
        records: impl IntoIterator<Item = (String, CompanyRecord)>,
        meta: PanelMeta,
    ) -> Result<Self, PanelError> {
        let mut grouped: BTreeMap<String, Vec<CompanyRecord>> = BTreeMap::new();
        for (id, rec) in records {
            if rec.values.len() != registry.len() {
                return Err(PanelError::Schema(format!(
                    "record for {id} has {} values, registry has {}",
                    rec.values.len(),
                    registry.len()
                )));
            }
            grouped.entry(id).or_default().push(rec);
        }
        let mut companies = Vec::with_capacity(grouped.len());
        for (id, mut recs) in grouped {
            recs.sort_by_key(|r| r.fiscal_year);
            if let Some(w) = recs.windows(2).find(|w| w[0].fiscal_year == w[1].fiscal_year) {
                return Err(PanelError::Duplicate {
                    company: id,
                    year: w[0].fiscal_year,
                });
            }
            companies.push(CompanySeries { id, records: recs });
        }
        Ok(Self {
            registry,
            companies,
            meta,
        })
    }

    /// Builds a panel without checking invariants; `validate_panel` reports
    /// whatever is wrong with it.
    pub fn from_series_unchecked(registry: Registry, mut companies: Vec<CompanySeries>, meta: PanelMeta) -> Self {
        companies.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            registry,
            companies,
            meta,
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn companies(&self) -> &[CompanySeries] {
        &self.companies
    }

    pub fn company(&self, id: &str) -> Option<&CompanySeries> {
        self.companies
            .binary_search_by(|c| c.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.companies[i])
    }

    pub fn n_companies(&self) -> usize {
        self.companies.len()
    }

    pub fn n_records(&self) -> usize {
        self.companies.iter().map(|c| c.records.len()).sum()
    }

    pub fn into_parts(self) -> (Registry, Vec<CompanySeries>, PanelMeta) {
        (self.registry, self.companies, self.meta)
    }

    /// Same registry and meta, different company set. Companies left without
    /// records are dropped.
    pub fn with_companies(&self, companies: Vec<CompanySeries>) -> Self {
        let mut companies: Vec<_> = companies.into_iter().filter(|c| !c.records.is_empty()).collect();
        companies.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            registry: self.registry.clone(),
            companies,
            meta: self.meta.clone(),
        }
    }

    /// Values of one indicator across all records (absent cells included).
    pub fn column(&self, index: usize) -> impl Iterator<Item = Option<f64>> + '_ {
        self.companies
            .iter()
            .flat_map(move |c| c.records.iter().map(move |r| r.value(index)))
    }

    /// Year-level macro vector taken from the first record carrying every
    /// requested macro value for that year.
    pub fn macro_table(&self, macro_indices: &[usize]) -> BTreeMap<i32, Vec<f64>> {
        let mut table = BTreeMap::new();
        for c in &self.companies {
            for r in &c.records {
                if table.contains_key(&r.fiscal_year) {
                    continue;
                }
                let row: Option<Vec<f64>> = macro_indices.iter().map(|&i| r.value(i)).collect();
                if let Some(row) = row {
                    table.insert(r.fiscal_year, row);
                }
            }
        }
        table
    }

    /// SHA-256 over the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_panel_to(self, &mut buf, b',').expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

pub const COMPANY_COLUMN: &str = "company_id";
pub const YEAR_COLUMN: &str = "fiscal_year";
pub const SECTOR_COLUMN: &str = "sector";
const META_PREFIX: &str = "# gmcast-panel";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    /// Non-empty cells that failed to parse as numbers.
    pub unparseable_cells: usize,
    pub ignored_columns: Vec<String>,
}

/// Loads a delimiter-separated panel. The delimiter is tab when the header
/// contains a tab, comma otherwise. Only registry indicators present as
/// columns are kept, in registry order.
pub fn load_panel(path: impl AsRef<Path>, schema: &Registry) -> Result<(CompanyPanel, LoadReport), PanelError> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_panel(&text, schema)
}

pub fn parse_panel(text: &str, schema: &Registry) -> Result<(CompanyPanel, LoadReport), PanelError> {
    let mut meta = PanelMeta::default();
    let mut body = text;
    if let Some(first) = text.lines().next() {
        if let Some(rest) = first.strip_prefix(META_PREFIX) {
            meta = parse_meta(rest);
            body = &text[first.len()..];
            body = body.trim_start_matches(['\r', '\n']);
        }
    }
    let header_line = body.lines().next().unwrap_or("");
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let company_col = find(COMPANY_COLUMN).ok_or_else(|| PanelError::Schema(format!("missing column `{COMPANY_COLUMN}`")))?;
    let year_col = find(YEAR_COLUMN).ok_or_else(|| PanelError::Schema(format!("missing column `{YEAR_COLUMN}`")))?;
    let sector_col = find(SECTOR_COLUMN).ok_or_else(|| PanelError::Schema(format!("missing column `{SECTOR_COLUMN}`")))?;

    let mut report = LoadReport::default();
    let mut present = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == company_col || i == year_col || i == sector_col {
            continue;
        }
        if schema.index_of_code(h).is_some() {
            present.push(h.to_string());
        } else {
            report.ignored_columns.push(h.to_string());
        }
    }
    let registry = schema.restrict(present.iter().map(String::as_str));
    let columns: Vec<usize> = registry
        .specs()
        .iter()
        .map(|s| find(s.id.as_str()).expect("restricted to present columns"))
        .collect();

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let company = row.get(company_col).unwrap_or("").to_string();
        if company.is_empty() {
            return Err(PanelError::Parse {
                line,
                message: "empty company_id".into(),
            });
        }
        let year: i32 = row.get(year_col).unwrap_or("").parse().map_err(|_| PanelError::Parse {
            line,
            message: format!("bad fiscal_year `{}`", row.get(year_col).unwrap_or("")),
        })?;
        let sector = row.get(sector_col).filter(|s| !s.is_empty()).map(str::to_string);
        let values = columns
            .iter()
            .map(|&c| {
                let cell = row.get(c).unwrap_or("");
                if cell.is_empty() {
                    return None;
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Some(v),
                    _ => {
                        report.unparseable_cells += 1;
                        None
                    }
                }
            })
            .collect();
        records.push((company, CompanyRecord::new(year, sector, values)));
        report.rows += 1;
    }
    if report.unparseable_cells > 0 {
        log::warn!("{} unparseable numeric cells treated as absent", report.unparseable_cells);
    }
    let panel = CompanyPanel::from_records(registry, records, meta)?;
    Ok((panel, report))
}

fn parse_meta(rest: &str) -> PanelMeta {
    let mut meta = PanelMeta::default();
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("transformed", v)) => meta.transformed = v == "true",
            Some(("inflation_adjusted", v)) => meta.inflation_adjusted = v == "true",
            Some(("base_year", v)) => meta.base_year = v.parse().ok(),
            _ => {}
        }
    }
    meta
}

pub fn write_panel(panel: &CompanyPanel, path: impl AsRef<Path>) -> Result<(), PanelError> {
    let mut f = File::create(path.as_ref())?;
    write_panel_to(panel, &mut f, b',')
}

/// Writes the panel with a leading meta comment line. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn write_panel_to<W: Write>(panel: &CompanyPanel, mut out: W, delimiter: u8) -> Result<(), PanelError> {
    let m = &panel.meta;
    let base = m.base_year.map(|y| y.to_string()).unwrap_or_else(|| "none".into());
    writeln!(
        out,
        "{META_PREFIX} transformed={} inflation_adjusted={} base_year={base}",
        m.transformed, m.inflation_adjusted
    )?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    let mut header = vec![COMPANY_COLUMN.to_string(), YEAR_COLUMN.to_string(), SECTOR_COLUMN.to_string()];
    header.extend(panel.registry.ids().map(|id| id.to_string()));
    w.write_record(&header)?;
    for c in &panel.companies {
        for r in &c.records {
            let mut row = vec![c.id.clone(), r.fiscal_year.to_string(), r.sector.clone().unwrap_or_default()];
            row.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateYear { company: String, year: i32 },
    YearOrder { company: String, previous: i32, year: i32 },
    /// The record carries a different number of values than the registry has indicators.
    UnregisteredValues { company: String, year: i32, values: usize, registered: usize },
    NonFinite { company: String, year: i32, indicator: IndicatorId },
    FinancialMacroOverlap { indicator: IndicatorId },
}

/// Reports every structural violation without touching the panel.
pub fn validate_panel(panel: &CompanyPanel) -> Vec<Violation> {
    let mut out = Vec::new();
    let reg = panel.registry();
    let mut groups: BTreeMap<&IndicatorId, Vec<IndicatorGroup>> = BTreeMap::new();
    for s in reg.specs() {
        groups.entry(&s.id).or_default().push(s.group);
    }
    for (id, g) in groups {
        if g.contains(&IndicatorGroup::Financial) && g.contains(&IndicatorGroup::Macro) {
            out.push(Violation::FinancialMacroOverlap { indicator: id.clone() });
        }
    }
    for c in panel.companies() {
        for w in c.records.windows(2) {
            let (a, b) = (w[0].fiscal_year, w[1].fiscal_year);
            if a == b {
                out.push(Violation::DuplicateYear {
                    company: c.id.clone(),
                    year: a,
                });
            } else if b < a {
                out.push(Violation::YearOrder {
                    company: c.id.clone(),
                    previous: a,
                    year: b,
                });
            }
        }
        for r in &c.records {
            if r.values.len() != reg.len() {
                out.push(Violation::UnregisteredValues {
                    company: c.id.clone(),
                    year: r.fiscal_year,
                    values: r.values.len(),
                    registered: reg.len(),
                });
            }
            for (v, spec) in r.values.iter().zip(reg.specs()) {
                if matches!(v, Some(x) if !x.is_finite()) {
                    out.push(Violation::NonFinite {
                        company: c.id.clone(),
                        year: r.fiscal_year,
                        indicator: spec.id.clone(),
                    });
                }
            }
        }
    }
    out
}
