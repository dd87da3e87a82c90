//! Grade matrices, grade scales, and the scale transformations applied before
//! model selection.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Higher grades are better.
    Ascending,
    /// Lower grades are better (e.g. 1 best, 5 worst).
    Descending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    Binary,
    Ordinal,
    Continuous,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ascending" | "asc" => Ok(Direction::Ascending),
            "descending" | "desc" => Ok(Direction::Descending),
            other => Err(Error::Invalid(format!("unknown direction '{other}'"))),
        }
    }
}

impl std::str::FromStr for ScaleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" => Ok(ScaleKind::Binary),
            "ordinal" => Ok(ScaleKind::Ordinal),
            "continuous" => Ok(ScaleKind::Continuous),
            other => Err(Error::Invalid(format!("unknown scale kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeScaleSpec {
    pub lowest_grade: f64,
    pub direction: Direction,
    pub kind: ScaleKind,
    /// In the same units as the grades.
    pub pass_threshold: Option<f64>,
}

impl GradeScaleSpec {
    pub fn new(lowest_grade: f64, direction: Direction, kind: ScaleKind) -> Self {
        GradeScaleSpec {
            lowest_grade,
            direction,
            kind,
            pass_threshold: None,
        }
    }

    pub fn binary() -> Self {
        Self::new(0.0, Direction::Ascending, ScaleKind::Binary)
    }

    pub fn continuous(lowest_grade: f64) -> Self {
        Self::new(lowest_grade, Direction::Ascending, ScaleKind::Continuous)
    }

    pub fn with_pass_threshold(mut self, t: f64) -> Self {
        self.pass_threshold = Some(t);
        self
    }

    fn admits(&self, g: f64) -> bool {
        match self.direction {
            Direction::Ascending => g >= self.lowest_grade,
            Direction::Descending => g <= self.lowest_grade,
        }
    }
}

/// Students × courses grade table with explicit missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CourseResponseMatrix {
    student_ids: Vec<String>,
    course_ids: Vec<String>,
    grades: Vec<Option<f64>>,
    scale: GradeScaleSpec,
    terms: Option<Vec<Option<i64>>>,
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Structure(format!("duplicate {what} identifier '{id}'")));
        }
    }
    Ok(())
}

impl CourseResponseMatrix {
    pub fn new(
        student_ids: Vec<String>,
        course_ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
        scale: GradeScaleSpec,
    ) -> Result<Self> {
        if rows.len() != student_ids.len() {
            return Err(Error::Structure(format!(
                "{} student ids for {} rows",
                student_ids.len(),
                rows.len()
            )));
        }
        let mut grades = Vec::with_capacity(rows.len() * course_ids.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != course_ids.len() {
                return Err(Error::Structure(format!(
                    "row {} has {} cells, expected {}",
                    i + 1,
                    row.len(),
                    course_ids.len()
                )));
            }
            grades.extend(row);
        }
        Self::from_flat(student_ids, course_ids, grades, scale)
    }

    /// Row-major constructor.
    pub fn from_flat(
        student_ids: Vec<String>,
        course_ids: Vec<String>,
        grades: Vec<Option<f64>>,
        scale: GradeScaleSpec,
    ) -> Result<Self> {
        check_unique(&student_ids, "student")?;
        check_unique(&course_ids, "course")?;
        if grades.len() != student_ids.len() * course_ids.len() {
            return Err(Error::Structure("grade table is not rectangular".into()));
        }
        let m = CourseResponseMatrix {
            student_ids,
            course_ids,
            grades,
            scale,
            terms: None,
        };
        m.check_bounds()?;
        Ok(m)
    }

    fn check_bounds(&self) -> Result<()> {
        for s in 0..self.n_students() {
            for c in 0..self.n_courses() {
                if let Some(g) = self.get(s, c) {
                    if !g.is_finite() {
                        return Err(Error::Invalid(format!(
                            "non-finite grade for student '{}' in course '{}'",
                            self.student_ids[s], self.course_ids[c]
                        )));
                    }
                    if !self.scale.admits(g) {
                        return Err(Error::Invalid(format!(
                            "grade {g} of student '{}' in course '{}' lies beyond the lowest grade {}",
                            self.student_ids[s], self.course_ids[c], self.scale.lowest_grade
                        )));
                    }
                    if self.scale.kind == ScaleKind::Binary && g != 0.0 && g != 1.0 {
                        return Err(Error::Invalid(format!(
                            "binary scale but grade {g} in course '{}'",
                            self.course_ids[c]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Attaches a term table of the same shape (row-major).
    pub fn with_terms(mut self, terms: Vec<Option<i64>>) -> Result<Self> {
        if terms.len() != self.grades.len() {
            return Err(Error::Structure("term table shape differs from grade table".into()));
        }
        self.terms = Some(terms);
        Ok(self)
    }

    pub fn without_terms(mut self) -> Self {
        self.terms = None;
        self
    }

    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_courses(&self) -> usize {
        self.course_ids.len()
    }

    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }

    pub fn course_ids(&self) -> &[String] {
        &self.course_ids
    }

    pub fn scale(&self) -> &GradeScaleSpec {
        &self.scale
    }

    pub fn has_terms(&self) -> bool {
        self.terms.is_some()
    }

    #[inline]
    pub fn get(&self, s: usize, c: usize) -> Option<f64> {
        self.grades[s * self.course_ids.len() + c]
    }

    pub fn term(&self, s: usize, c: usize) -> Option<i64> {
        self.terms
            .as_ref()
            .and_then(|t| t[s * self.course_ids.len() + c])
    }

    pub fn grades(&self) -> &[Option<f64>] {
        &self.grades
    }

    pub fn terms(&self) -> Option<&[Option<i64>]> {
        self.terms.as_deref()
    }

    pub fn course_index(&self, id: &str) -> Result<usize> {
        self.course_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::Lookup(format!("course '{id}'")))
    }

    pub fn student_index(&self, id: &str) -> Result<usize> {
        self.student_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| Error::Lookup(format!("student '{id}'")))
    }

    pub fn observed_count(&self) -> usize {
        self.grades.iter().filter(|g| g.is_some()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.grades.len() - self.observed_count()
    }

    pub fn is_complete(&self) -> bool {
        self.grades.iter().all(Option::is_some)
    }

    /// Observed grades of course `c` as (student index, grade).
    pub fn column(&self, c: usize) -> Vec<(usize, f64)> {
        (0..self.n_students())
            .filter_map(|s| self.get(s, c).map(|g| (s, g)))
            .collect()
    }

    /// Observed grades of student `s` as (course index, grade).
    pub fn row(&self, s: usize) -> Vec<(usize, f64)> {
        (0..self.n_courses())
            .filter_map(|c| self.get(s, c).map(|g| (c, g)))
            .collect()
    }

    pub fn observed_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.grades.iter().filter_map(|g| *g)
    }

    /// Distinct observed values, ascending.
    pub fn distinct_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.observed_values().collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// Copy with every observed grade passed through `f`; missing cells kept.
    pub fn map_observed(&self, scale: GradeScaleSpec, f: impl Fn(f64) -> f64) -> Result<Self> {
        let grades = self.grades.iter().map(|g| g.map(&f)).collect();
        let mut m = Self::from_flat(
            self.student_ids.clone(),
            self.course_ids.clone(),
            grades,
            scale,
        )?;
        m.terms = self.terms.clone();
        Ok(m)
    }

    /// Copy with grades replaced wholesale (same shape and ids).
    pub fn with_grades(&self, grades: Vec<Option<f64>>) -> Result<Self> {
        let mut m = Self::from_flat(
            self.student_ids.clone(),
            self.course_ids.clone(),
            grades,
            self.scale.clone(),
        )?;
        m.terms = self.terms.clone();
        Ok(m)
    }

    pub fn with_scale(&self, scale: GradeScaleSpec) -> Result<Self> {
        self.map_observed(scale, |g| g)
    }

    /// Sub-matrix of the given rows and columns, in the given order.
    pub fn select(&self, students: &[usize], courses: &[usize]) -> Self {
        let nc = self.n_courses();
        let mut grades = Vec::with_capacity(students.len() * courses.len());
        let mut terms = self.terms.as_ref().map(|_| Vec::new());
        for &s in students {
            for &c in courses {
                grades.push(self.grades[s * nc + c]);
                if let (Some(out), Some(t)) = (terms.as_mut(), self.terms.as_ref()) {
                    out.push(t[s * nc + c]);
                }
            }
        }
        CourseResponseMatrix {
            student_ids: students.iter().map(|&s| self.student_ids[s].clone()).collect(),
            course_ids: courses.iter().map(|&c| self.course_ids[c].clone()).collect(),
            grades,
            scale: self.scale.clone(),
            terms,
        }
    }

    /// Rows resampled by index; repeated students get suffixed ids.
    pub fn resample_students(&self, picks: &[usize]) -> Self {
        let mut m = self.select(picks, &(0..self.n_courses()).collect::<Vec<_>>());
        for (k, id) in m.student_ids.iter_mut().enumerate() {
            *id = format!("{id}#{k}");
        }
        m
    }
}

/// A transformed matrix plus what the transform had to report.
#[derive(Debug, Clone)]
pub struct Transformed {
    pub matrix: CourseResponseMatrix,
    pub warnings: Vec<String>,
    pub degenerate_courses: Vec<String>,
}

fn is_missing_token(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na")
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<String>)>)> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(&text);
    let first = text.lines().next().unwrap_or("");
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| Error::Structure(e.to_string()))?,
        None => return Err(Error::Structure("empty file".into())),
    };
    let columns: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Structure(e.to_string()))?;
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != columns.len() + 1 {
            return Err(Error::Structure(format!(
                "row {} has {} cells, header has {}",
                i + 2,
                rec.len(),
                columns.len() + 1
            )));
        }
        let id = rec[0].trim().to_string();
        let cells = rec.iter().skip(1).map(|c| c.trim().to_string()).collect();
        rows.push((id, cells));
    }
    Ok((columns, rows))
}

/// Reads a delimited grade table: header row of course names, first column of
/// student ids, empty (or `nan`/`NA`) cells missing. Comma or tab delimited.
pub fn load_matrix(path: impl AsRef<Path>, spec: GradeScaleSpec) -> Result<CourseResponseMatrix> {
    let (courses, rows) = read_table(path.as_ref())?;
    check_unique(&courses, "course")?;
    let mut students = Vec::with_capacity(rows.len());
    let mut grades = Vec::with_capacity(rows.len() * courses.len());
    for (i, (id, cells)) in rows.into_iter().enumerate() {
        for (j, cell) in cells.iter().enumerate() {
            if is_missing_token(cell) {
                grades.push(None);
            } else {
                let g: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: i + 2,
                    column: courses[j].clone(),
                    message: format!("'{cell}' is not a number"),
                })?;
                grades.push(Some(g));
            }
        }
        students.push(id);
    }
    CourseResponseMatrix::from_flat(students, courses, grades, spec)
}

/// Reads a term table laid out like the grade table and attaches it,
/// matching rows and columns by identifier.
pub fn load_terms(path: impl AsRef<Path>, m: CourseResponseMatrix) -> Result<CourseResponseMatrix> {
    let (courses, rows) = read_table(path.as_ref())?;
    let col_pos: Vec<usize> = courses
        .iter()
        .map(|c| m.course_index(c))
        .collect::<Result<_>>()?;
    let mut terms = vec![None; m.n_students() * m.n_courses()];
    for (i, (id, cells)) in rows.into_iter().enumerate() {
        let s = m.student_index(&id)?;
        for (j, cell) in cells.iter().enumerate() {
            if is_missing_token(cell) {
                continue;
            }
            let t: i64 = cell.parse().map_err(|_| Error::Parse {
                row: i + 2,
                column: courses[j].clone(),
                message: format!("'{cell}' is not an integer term"),
            })?;
            terms[s * m.n_courses() + col_pos[j]] = Some(t);
        }
    }
    m.with_terms(terms)
}

fn write_cells(
    path: &Path,
    m: &CourseResponseMatrix,
    cell: impl Fn(usize, usize) -> String,
) -> Result<()> {
    let io = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e.into(),
    })?;
    let mut header = vec!["student".to_string()];
    header.extend(m.course_ids().iter().cloned());
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for s in 0..m.n_students() {
        let mut rec = vec![m.student_ids()[s].clone()];
        rec.extend((0..m.n_courses()).map(|c| cell(s, c)));
        w.write_record(&rec).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn write_matrix(m: &CourseResponseMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_cells(path.as_ref(), m, |s, c| {
        m.get(s, c).map(|g| g.to_string()).unwrap_or_default()
    })
}

pub fn write_terms(m: &CourseResponseMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_cells(path.as_ref(), m, |s, c| {
        m.term(s, c).map(|t| t.to_string()).unwrap_or_default()
    })
}

/// Reflects a descending scale so that 0 is the worst grade and higher is
/// better; ascending scales pass through untouched.
pub fn normalize_scale(m: &CourseResponseMatrix) -> CourseResponseMatrix {
    let spec = m.scale();
    if spec.direction == Direction::Ascending {
        return m.clone();
    }
    let lowest = spec.lowest_grade;
    let scale = GradeScaleSpec {
        lowest_grade: 0.0,
        direction: Direction::Ascending,
        kind: spec.kind,
        pass_threshold: spec.pass_threshold.map(|t| lowest - t),
    };
    m.map_observed(scale, |g| lowest - g)
        .expect("reflection keeps grades within the canonical bounds")
}

/// Pooled mid-rank percentile of every observed grade, on [0, 100].
pub fn percentile_transform(m: &CourseResponseMatrix) -> Transformed {
    let values: Vec<f64> = m.observed_values().collect();
    let n = values.len() as f64;
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    if sorted.first() == sorted.last() {
        warnings.push("all observed grades are identical; percentiles are all 50".to_string());
    }
    let pct = |g: f64| {
        let below = sorted.partition_point(|&x| x < g) as f64;
        let upto = sorted.partition_point(|&x| x <= g) as f64;
        100.0 * (below + 0.5 * (upto - below)) / n
    };
    let scale = GradeScaleSpec {
        lowest_grade: 0.0,
        direction: Direction::Ascending,
        kind: ScaleKind::Continuous,
        pass_threshold: m.scale().pass_threshold.map(pct),
    };
    let matrix = m
        .map_observed(scale, pct)
        .expect("percentiles lie in [0, 100]");
    Transformed {
        matrix,
        warnings,
        degenerate_courses: Vec::new(),
    }
}

/// Pass (1) iff grade ≥ threshold. Constant columns are flagged.
pub fn binarize(m: &CourseResponseMatrix, threshold: f64) -> Result<Transformed> {
    let values = m.distinct_values();
    let (lo, hi) = match (values.first(), values.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Invalid("matrix has no observed grades".into())),
    };
    if threshold < lo || threshold > hi {
        return Err(Error::Invalid(format!(
            "pass threshold {threshold} outside observed grade range [{lo}, {hi}]"
        )));
    }
    let matrix = m.map_observed(GradeScaleSpec::binary(), |g| if g >= threshold { 1.0 } else { 0.0 })?;
    let mut degenerate_courses = Vec::new();
    for c in 0..matrix.n_courses() {
        let col = matrix.column(c);
        let passes = col.iter().filter(|(_, g)| *g == 1.0).count();
        if !col.is_empty() && (passes == 0 || passes == col.len()) {
            degenerate_courses.push(matrix.course_ids()[c].clone());
        }
    }
    let warnings = degenerate_courses
        .iter()
        .map(|c| format!("course '{c}' is constant after binarization"))
        .collect();
    Ok(Transformed {
        matrix,
        warnings,
        degenerate_courses,
    })
}

/// Drops students with fewer than `min_observed` grades, then courses left
/// without any grade.
pub fn filter_students(m: &CourseResponseMatrix, min_observed: usize) -> Result<Transformed> {
    if min_observed < 1 {
        return Err(Error::Invalid("min_observed must be at least 1".into()));
    }
    let keep_s: Vec<usize> = (0..m.n_students())
        .filter(|&s| m.row(s).len() >= min_observed)
        .collect();
    if keep_s.is_empty() {
        return Err(Error::Invalid(format!(
            "no student has at least {min_observed} observed grades"
        )));
    }
    let all_c: Vec<usize> = (0..m.n_courses()).collect();
    let rows = m.select(&keep_s, &all_c);
    let mut warnings = Vec::new();
    let removed = m.n_students() - keep_s.len();
    if removed > 0 {
        warnings.push(format!(
            "{removed} students with fewer than {min_observed} grades removed"
        ));
    }
    let keep_c: Vec<usize> = all_c
        .iter()
        .copied()
        .filter(|&c| !rows.column(c).is_empty())
        .collect();
    for c in all_c.iter().filter(|c| !keep_c.contains(c)) {
        warnings.push(format!("course '{}' has no remaining grades and was removed", m.course_ids()[*c]));
    }
    if keep_c.is_empty() {
        return Err(Error::Invalid("filtering removed every course".into()));
    }
    let all_s: Vec<usize> = (0..rows.n_students()).collect();
    Ok(Transformed {
        matrix: rows.select(&all_s, &keep_c),
        warnings,
        degenerate_courses: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Minus,
    Plus,
}

impl Group {
    pub fn code(self) -> f64 {
        match self {
            Group::Minus => -1.0,
            Group::Plus => 1.0,
        }
    }

    pub fn from_code(code: i64) -> Option<Group> {
        match code {
            -1 => Some(Group::Minus),
            1 => Some(Group::Plus),
            _ => None,
        }
    }

    pub fn flipped(self) -> Group {
        match self {
            Group::Minus => Group::Plus,
            Group::Plus => Group::Minus,
        }
    }
}

/// Student → group in {−1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment(BTreeMap<String, Group>);

impl GroupAssignment {
    /// Validates that every student exists in `m` and both groups are used.
    pub fn new(map: BTreeMap<String, Group>, m: &CourseResponseMatrix) -> Result<Self> {
        let known: HashSet<&str> = m.student_ids().iter().map(String::as_str).collect();
        let unmatched: Vec<&str> = map
            .keys()
            .map(String::as_str)
            .filter(|id| !known.contains(id))
            .collect();
        if !unmatched.is_empty() {
            return Err(Error::Lookup(format!(
                "group file lists students absent from the matrix: {}",
                unmatched.join(", ")
            )));
        }
        let g = GroupAssignment(map);
        if !g.0.values().any(|&x| x == Group::Minus) || !g.0.values().any(|&x| x == Group::Plus) {
            return Err(Error::Invalid("both groups must be non-empty".into()));
        }
        Ok(g)
    }

    pub fn get(&self, student: &str) -> Option<Group> {
        self.0.get(student).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn flipped(&self) -> GroupAssignment {
        GroupAssignment(self.0.iter().map(|(k, v)| (k.clone(), v.flipped())).collect())
    }
}

/// Reads `student_id,group` lines (optional header) with group ∈ {−1, 1}.
pub fn load_groups(path: impl AsRef<Path>, m: &CourseResponseMatrix) -> Result<GroupAssignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let delimiter = if text.lines().next().unwrap_or("").contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut map = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Structure(e.to_string()))?;
        if rec.len() < 2 {
            continue;
        }
        let id = rec[0].trim();
        let code = rec[1].trim();
        let parsed = code.parse::<i64>().ok().and_then(Group::from_code);
        match parsed {
            Some(g) => {
                if map.insert(id.to_string(), g).is_some() {
                    return Err(Error::Structure(format!("student '{id}' listed twice in group file")));
                }
            }
            None if i == 0 => continue, // header
            None => {
                return Err(Error::Parse {
                    row: i + 1,
                    column: "group".into(),
                    message: format!("'{code}' is not -1 or 1"),
                })
            }
        }
    }
    GroupAssignment::new(map, m)
}
