use branch_core::dataset::{from_json_str, validate_dataset, Dataset, ANSWER_TOLERANCE};
use serde_json::Value;

/// Fields whose content has no invariant to break: identifiers nothing else
/// refers to, free text, annotator metadata, and optional ratings.
pub const FREE_FIELDS: &[&str] = &[
    "id@post",
    "text",
    "domain",
    "notes",
    "feasibility",
    "confidence",
    "reliability",
];

#[derive(Debug, Clone)]
pub struct Mutant {
    pub path: String,
    pub operator: &'static str,
    pub document: Value,
    pub free: bool,
}

#[derive(Debug, Default)]
pub struct Sweep {
    pub caught: usize,
    pub missed: Vec<String>,
    pub free_caught: usize,
    pub free_missed: usize,
}

impl Sweep {
    pub fn checked(&self) -> usize {
        self.caught + self.missed.len()
    }

    pub fn rate(&self) -> f64 {
        self.caught as f64 / self.checked() as f64
    }
}

fn field_name(path: &[String]) -> String {
    let last = path.last().cloned().unwrap_or_default();
    if last == "id" && path.len() == 3 {
        "id@post".to_string()
    } else {
        last
    }
}

/// Free mutants change something no invariant constrains: the fields named
/// in [`FREE_FIELDS`], dropping a parent entry, dropping the optional answer
/// of a decomposed query, or moving a number by less than the validator's
/// rounding tolerance.
fn is_free(doc: &Value, path: &[String], operator: &str) -> bool {
    let name = field_name(path);
    if FREE_FIELDS.contains(&name.as_str()) {
        return true;
    }
    if operator != "delete" {
        return false;
    }
    let mut d = doc.clone();
    let parent = at(&mut d, &path[..path.len() - 1]);
    path.len() >= 2 && path[path.len() - 2] == "parents" || name == "answer" && parent.get("subqueries").is_some()
}

fn at<'a>(doc: &'a mut Value, path: &[String]) -> &'a mut Value {
    let mut cur = doc;
    for seg in path {
        cur = match cur {
            Value::Object(m) => m.get_mut(seg).unwrap(),
            Value::Array(a) => &mut a[seg.parse::<usize>().unwrap()],
            _ => unreachable!(),
        };
    }
    cur
}

fn walk(v: &Value, path: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                path.push(k.clone());
                out.push(path.clone());
                walk(child, path, out);
                path.pop();
            }
        }
        Value::Array(a) => {
            for (i, child) in a.iter().enumerate() {
                path.push(i.to_string());
                if !child.is_object() {
                    out.push(path.clone());
                }
                walk(child, path, out);
                path.pop();
            }
        }
        _ => {}
    }
}

/// Every single-field mutant of `doc`.
pub fn mutants(doc: &Value) -> Vec<Mutant> {
    let mut paths = Vec::new();
    walk(doc, &mut Vec::new(), &mut paths);
    let mut out = Vec::new();
    for path in paths {
        let target = at(&mut doc.clone(), &path).clone();
        let mut push = |operator: &'static str, tolerated: bool, f: &dyn Fn(&mut Value)| {
            let mut d = doc.clone();
            f(&mut d);
            let free = tolerated || is_free(doc, &path, operator);
            out.push(Mutant {
                path: path.join("."),
                operator,
                document: d,
                free,
            });
        };
        match &target {
            Value::String(_) => push("suffix", false, &|d| {
                let v = at(d, &path);
                *v = Value::String(format!("{}_x", v.as_str().unwrap()));
            }),
            Value::Number(n) => {
                let n = n.as_f64().unwrap();
                let as_int = target.is_u64();
                let tolerated = |new: f64| (new - n).abs() <= ANSWER_TOLERANCE * n.abs();
                push("double", tolerated(n * 2.0), &|d| {
                    *at(d, &path) = if as_int {
                        Value::from((n as u64) * 2 + u64::from(n == 0.0))
                    } else {
                        Value::from(n * 2.0)
                    };
                });
                push("plus_one", tolerated(n + 1.0), &|d| {
                    *at(d, &path) = if as_int {
                        Value::from(n as u64 + 1)
                    } else {
                        Value::from(n + 1.0)
                    };
                });
            }
            Value::Bool(b) => {
                let b = *b;
                push("flip", false, &|d| *at(d, &path) = Value::Bool(!b));
            }
            _ => {}
        }
        let parent_is_object = {
            let mut d = doc.clone();
            !path.is_empty() && at(&mut d, &path[..path.len() - 1]).is_object()
        };
        if parent_is_object {
            push("delete", false, &|d| {
                let key = path.last().unwrap().clone();
                at(d, &path[..path.len() - 1]).as_object_mut().unwrap().remove(&key);
            });
            if path.len() >= 2 && path[path.len() - 2] == "parents" {
                push("rename_key", false, &|d| {
                    let key = path.last().unwrap().clone();
                    let m = at(d, &path[..path.len() - 1]).as_object_mut().unwrap();
                    let v = m.remove(&key).unwrap();
                    m.insert(format!("{key}_x"), v);
                });
            }
        }
    }
    out
}

/// Whether loading or validation notices the mutant.
pub fn caught(doc: &Value) -> bool {
    match from_json_str::<Dataset>(&doc.to_string()) {
        Err(_) => true,
        Ok(ds) => !validate_dataset(&ds).is_empty(),
    }
}

pub fn sweep(doc: &Value) -> Sweep {
    let mut s = Sweep::default();
    for m in mutants(doc) {
        let hit = caught(&m.document);
        match (m.free, hit) {
            (true, true) => s.free_caught += 1,
            (true, false) => s.free_missed += 1,
            (false, true) => s.caught += 1,
            (false, false) => s.missed.push(format!("{} ({})", m.path, m.operator)),
        }
    }
    s
}
