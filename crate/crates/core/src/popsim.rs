//! Synthetic populations drawn from a known categorical network, and a chat
//! backend that answers every stage from them exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{wrap, BackendError, ChatBackend, CompletionRequest, TaskHint, TemplateId};
use crate::model::{Answer, Disclosure, DisclosureCategory, DocumentContext, Fact, QueryKind, QuerySemantics};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PopsimError {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed table for `{attribute}`: {message}")]
    MalformedCpt { attribute: String, message: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{attribute}` has no value `{value}`")]
    UnknownValue { attribute: String, value: String },
    #[error("no individual matches {0}")]
    ZeroSupport(String),
    #[error("{size} individuals cannot realise the generator exactly: {detail}")]
    NotExact { size: u64, detail: String },
    #[error("population size must be at least 1")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<DisclosureCategory>,
}

impl Attribute {
    pub fn new(name: impl Into<String>, values: &[&str]) -> Self {
        Attribute {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            category: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = PopsimError;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self, Self::Error> {
        AttributeSchema::new(attributes)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(s: AttributeSchema) -> Self {
        s.attributes
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self, PopsimError> {
        if attributes.is_empty() {
            return Err(PopsimError::InvalidSchema("no attributes".into()));
        }
        let mut names = BTreeSet::new();
        for a in &attributes {
            if !names.insert(a.name.as_str()) {
                return Err(PopsimError::InvalidSchema(format!("duplicate attribute `{}`", a.name)));
            }
            if a.values.is_empty() {
                return Err(PopsimError::InvalidSchema(format!(
                    "attribute `{}` has no values",
                    a.name
                )));
            }
            let distinct: BTreeSet<_> = a.values.iter().collect();
            if distinct.len() != a.values.len() {
                return Err(PopsimError::InvalidSchema(format!(
                    "attribute `{}` repeats a value",
                    a.name
                )));
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, PopsimError> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| PopsimError::UnknownAttribute(name.into()))
    }

    /// `(attribute index, value index)` for a fact.
    pub fn resolve(&self, fact: &Fact) -> Result<(usize, usize), PopsimError> {
        let a = self.index_of(&fact.attribute)?;
        let v = self.attributes[a]
            .values
            .iter()
            .position(|v| *v == fact.value)
            .ok_or_else(|| PopsimError::UnknownValue {
                attribute: fact.attribute.clone(),
                value: fact.value.clone(),
            })?;
        Ok((a, v))
    }

    pub fn fact(&self, attribute: usize, value: usize) -> Fact {
        let a = &self.attributes[attribute];
        Fact::new(a.name.clone(), a.values[value].clone())
    }
}

/// Conditional table for one attribute. Rows are indexed by the parents'
/// values in mixed radix, first parent most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNode {
    pub parents: Vec<usize>,
    pub table: Vec<Vec<f64>>,
}

/// Categorical network whose attribute order is topological: every parent
/// index is smaller than its child's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGenerator")]
pub struct GeneratorNetwork {
    pub schema: AttributeSchema,
    pub nodes: Vec<GeneratorNode>,
}

#[derive(Deserialize)]
struct RawGenerator {
    schema: AttributeSchema,
    nodes: Vec<GeneratorNode>,
}

impl TryFrom<RawGenerator> for GeneratorNetwork {
    type Error = PopsimError;

    fn try_from(raw: RawGenerator) -> Result<Self, Self::Error> {
        GeneratorNetwork::new(raw.schema, raw.nodes)
    }
}

impl GeneratorNetwork {
    pub fn new(schema: AttributeSchema, nodes: Vec<GeneratorNode>) -> Result<Self, PopsimError> {
        if nodes.len() != schema.len() {
            return Err(PopsimError::InvalidSchema(format!(
                "{} attributes but {} tables",
                schema.len(),
                nodes.len()
            )));
        }
        let g = GeneratorNetwork { schema, nodes };
        for i in 0..g.nodes.len() {
            g.check_node(i)?;
        }
        Ok(g)
    }

    fn check_node(&self, i: usize) -> Result<(), PopsimError> {
        let attr = &self.schema.attributes[i];
        let node = &self.nodes[i];
        let bad = |message: String| PopsimError::MalformedCpt {
            attribute: attr.name.clone(),
            message,
        };
        let mut seen = BTreeSet::new();
        for &p in &node.parents {
            if p >= i {
                return Err(bad(format!("parent {p} does not precede attribute {i}")));
            }
            if !seen.insert(p) {
                return Err(bad(format!("parent {p} listed twice")));
            }
        }
        let rows: usize = node
            .parents
            .iter()
            .map(|&p| self.schema.attributes[p].values.len())
            .product();
        if node.table.len() != rows {
            return Err(bad(format!("expected {rows} rows, found {}", node.table.len())));
        }
        for (r, row) in node.table.iter().enumerate() {
            if row.len() != attr.values.len() {
                return Err(bad(format!(
                    "row {r} has {} entries for {} values",
                    row.len(),
                    attr.values.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(bad(format!("row {r} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(bad(format!("row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Table row for attribute `i` given a (partial) assignment covering its
    /// parents.
    pub fn row(&self, i: usize, assignment: &[usize]) -> &[f64] {
        let node = &self.nodes[i];
        let mut idx = 0;
        for &p in &node.parents {
            idx = idx * self.schema.attributes[p].values.len() + assignment[p];
        }
        &node.table[idx]
    }

    /// Joint probability of a full assignment.
    pub fn probability(&self, assignment: &[usize]) -> f64 {
        (0..self.nodes.len())
            .map(|i| self.row(i, assignment)[assignment[i]])
            .product()
    }

    pub fn parents_of(&self, i: usize) -> &[usize] {
        &self.nodes[i].parents
    }

    /// Random network over `attributes` attributes with 2 to `max_values`
    /// values each and at most two parents per attribute.
    pub fn random(attributes: usize, max_values: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attributes = attributes.max(1);
        let categories = DisclosureCategory::ALL;
        let schema: Vec<Attribute> = (0..attributes)
            .map(|i| {
                let n = rng.random_range(2..=max_values.max(2));
                Attribute {
                    name: format!("a{i}"),
                    values: (0..n).map(|v| format!("a{i}v{v}")).collect(),
                    category: Some(categories[i % categories.len()]),
                }
            })
            .collect();
        let mut nodes = Vec::with_capacity(attributes);
        for i in 0..attributes {
            let mut parents: Vec<usize> = (0..i).filter(|_| rng.random_bool(0.5)).collect();
            while parents.len() > 2 {
                let drop = rng.random_range(0..parents.len());
                parents.remove(drop);
            }
            let rows: usize = parents.iter().map(|&p| schema[p].values.len()).product();
            let width = schema[i].values.len();
            let table = (0..rows)
                .map(|_| {
                    let w: Vec<f64> = (0..width).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / total).collect()
                })
                .collect();
            nodes.push(GeneratorNode { parents, table });
        }
        GeneratorNetwork::new(AttributeSchema::new(schema).expect("generated schema is valid"), nodes)
            .expect("generated tables are valid")
    }
}

/// A finite population of full attribute assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    schema: AttributeSchema,
    individuals: Vec<Vec<usize>>,
    histogram: BTreeMap<Vec<usize>, u64>,
    seed: Option<u64>,
}

impl Population {
    pub fn from_individuals(schema: AttributeSchema, individuals: Vec<Vec<usize>>) -> Result<Self, PopsimError> {
        if individuals.is_empty() {
            return Err(PopsimError::Empty);
        }
        for ind in &individuals {
            if ind.len() != schema.len() || ind.iter().zip(schema.attributes()).any(|(&v, a)| v >= a.values.len()) {
                return Err(PopsimError::InvalidSchema("individual outside the schema".into()));
            }
        }
        let mut histogram = BTreeMap::new();
        for ind in &individuals {
            *histogram.entry(ind.clone()).or_insert(0) += 1;
        }
        Ok(Population {
            schema,
            individuals,
            histogram,
            seed: None,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn individuals(&self) -> &[Vec<usize>] {
        &self.individuals
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    fn resolve_all(&self, facts: &[Fact]) -> Result<Vec<(usize, usize)>, PopsimError> {
        facts.iter().map(|f| self.schema.resolve(f)).collect()
    }

    /// Individuals matching every fact.
    pub fn count_matching(&self, facts: &[Fact]) -> Result<u64, PopsimError> {
        let pairs = self.resolve_all(facts)?;
        Ok(self
            .histogram
            .iter()
            .filter(|(a, _)| pairs.iter().all(|&(i, v)| a[i] == v))
            .map(|(_, n)| n)
            .sum())
    }

    /// Exact population frequency for a query: a count for population
    /// queries, a conditional share for percentage queries.
    pub fn oracle_value(&self, kind: QueryKind, semantics: &QuerySemantics) -> Result<f64, PopsimError> {
        let mut joint = semantics.conditions.clone();
        joint.extend(semantics.target.iter().cloned());
        let hits = self.count_matching(&joint)?;
        if hits == 0 {
            return Err(PopsimError::ZeroSupport(describe_facts(&joint)));
        }
        match kind {
            QueryKind::Population => Ok(hits as f64),
            QueryKind::Percentage => {
                let base = self.count_matching(&semantics.conditions)?;
                Ok(hits as f64 / base as f64)
            }
        }
    }

    pub fn oracle_answer(&self, kind: QueryKind, semantics: &QuerySemantics) -> Result<Answer, PopsimError> {
        let value = self.oracle_value(kind, semantics)?;
        Ok(Answer::new(value, kind, 1.0, "oracle").expect("oracle values respect kind bounds"))
    }
}

fn describe_facts(facts: &[Fact]) -> String {
    if facts.is_empty() {
        return "everyone".into();
    }
    facts.iter().map(Fact::to_string).collect::<Vec<_>>().join(" and ")
}

/// Ancestral sampling of `size` individuals.
pub fn sample_population(generator: &GeneratorNetwork, size: usize, seed: u64) -> Result<Population, PopsimError> {
    if size == 0 {
        return Err(PopsimError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = generator.schema.len();
    let mut individuals = Vec::with_capacity(size);
    for _ in 0..size {
        let mut ind = vec![0; n];
        for i in 0..n {
            let row = generator.row(i, &ind);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = row.len() - 1;
            for (v, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = v;
                    break;
                }
            }
            ind[i] = pick;
        }
        individuals.push(ind);
    }
    let mut pop = Population::from_individuals(generator.schema.clone(), individuals)?;
    pop.seed = Some(seed);
    Ok(pop)
}

/// Population in which every full assignment appears exactly
/// `size * P(assignment)` times, so that empirical frequencies equal the
/// generator's probabilities and its independences hold exactly.
pub fn exact_population(generator: &GeneratorNetwork, size: u64) -> Result<Population, PopsimError> {
    if size == 0 {
        return Err(PopsimError::Empty);
    }
    let dims: Vec<usize> = generator.schema.attributes().iter().map(|a| a.values.len()).collect();
    let mut assignment = vec![0; dims.len()];
    let mut individuals = Vec::new();
    loop {
        let c = size as f64 * generator.probability(&assignment);
        let rounded = c.round();
        if (c - rounded).abs() > 1e-6 {
            return Err(PopsimError::NotExact {
                size,
                detail: format!("assignment {assignment:?} needs {c} copies"),
            });
        }
        for _ in 0..rounded as u64 {
            individuals.push(assignment.clone());
        }
        let mut k = dims.len();
        loop {
            if k == 0 {
                let total = individuals.len() as u64;
                if total != size {
                    return Err(PopsimError::NotExact {
                        size,
                        detail: format!("copies add up to {total}"),
                    });
                }
                return Population::from_individuals(generator.schema.clone(), individuals);
            }
            k -= 1;
            assignment[k] += 1;
            if assignment[k] < dims[k] {
                break;
            }
            assignment[k] = 0;
        }
    }
}

/// A document whose disclosures are one individual's attribute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub generator: GeneratorNetwork,
    pub population_size: u64,
    /// Sampling seed, or `None` for an exact population.
    #[serde(default)]
    pub seed: Option<u64>,
    pub context: DocumentContext,
    pub true_k: u64,
}

impl Scenario {
    pub fn population(&self) -> Result<Population, PopsimError> {
        match self.seed {
            Some(seed) => sample_population(&self.generator, self.population_size as usize, seed),
            None => exact_population(&self.generator, self.population_size),
        }
    }

    /// Builds a scenario around individual `index` of `population`, disclosing
    /// the listed attributes (all when `attributes` is `None`).
    pub fn around(
        generator: &GeneratorNetwork,
        population: &Population,
        index: usize,
        attributes: Option<&[usize]>,
    ) -> Result<Scenario, PopsimError> {
        let schema = &generator.schema;
        let ind = population.individuals().get(index).ok_or(PopsimError::Empty)?;
        let all: Vec<usize> = (0..schema.len()).collect();
        let chosen = attributes.unwrap_or(&all);
        let mut disclosures = Vec::new();
        let mut sentences = Vec::new();
        let mut facts = Vec::new();
        for &a in chosen {
            let attr = schema
                .attributes()
                .get(a)
                .ok_or_else(|| PopsimError::UnknownAttribute(a.to_string()))?;
            let value = &attr.values[ind[a]];
            sentences.push(format!("My {} is {}.", attr.name, value));
            let category = attr.category.unwrap_or(DisclosureCategory::Events);
            disclosures
                .push(Disclosure::new(format!("d{a}"), value.clone(), category).with_attribute(attr.name.clone()));
            facts.push(schema.fact(a, ind[a]));
        }
        let text = sentences.join(" ");
        let context = DocumentContext::new(format!("synthetic-{index}"), text, None, disclosures)
            .map_err(|e| PopsimError::InvalidSchema(e.to_string()))?;
        let true_k = population.count_matching(&facts)?;
        Ok(Scenario {
            generator: generator.clone(),
            population_size: population.len() as u64,
            seed: population.seed(),
            context,
            true_k,
        })
    }

    /// Scenario around a uniformly chosen individual of a sampled population.
    pub fn sampled(generator: &GeneratorNetwork, size: usize, seed: u64) -> Result<Scenario, PopsimError> {
        let pop = sample_population(generator, size, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a210);
        let index = rng.random_range(0..pop.len());
        Scenario::around(generator, &pop, index, None)
    }
}

fn list_of<'a>(items: impl IntoIterator<Item = &'a Disclosure>) -> String {
    let inner: String = items
        .into_iter()
        .map(|d| format!("{}{}", wrap("answer", &d.span), wrap("type", d.category.label())))
        .collect();
    wrap("list", &inner)
}

fn query_text(kind: QueryKind, semantics: &QuerySemantics) -> String {
    match kind {
        QueryKind::Population => format!("number of people with {}", describe_facts(&semantics.target)),
        QueryKind::Percentage => format!(
            "percentage of people with {} THAT have {}",
            describe_facts(&semantics.conditions),
            describe_facts(&semantics.target)
        ),
    }
}

/// Backend with perfect knowledge of a population and of the generator's
/// structure. It replies in the same tagged formats a live model would.
pub struct OracleBackend {
    population: Population,
    generator: GeneratorNetwork,
}

impl OracleBackend {
    pub fn new(population: Population, generator: GeneratorNetwork) -> Self {
        OracleBackend { population, generator }
    }

    pub fn population(&self) -> &Population {
        &self.population
    }

    fn attribute_index(&self, d: &Disclosure) -> Result<usize, BackendError> {
        let name = d.fact().attribute;
        self.generator
            .schema
            .index_of(&name)
            .map_err(|e| BackendError::Oracle(e.to_string()))
    }

    fn value(&self, kind: QueryKind, semantics: &QuerySemantics) -> Result<f64, BackendError> {
        self.population
            .oracle_value(kind, semantics)
            .map_err(|e| BackendError::Oracle(e.to_string()))
    }
}

impl ChatBackend for OracleBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        match &request.hint {
            TaskHint::Selection { candidates } => {
                let known: Vec<&Disclosure> = candidates
                    .iter()
                    .filter(|d| self.population.schema.resolve(&d.fact()).is_ok())
                    .collect();
                Ok(list_of(known))
            }
            TaskHint::Ordering { subset } => {
                let mut keyed = subset
                    .iter()
                    .map(|d| Ok((self.attribute_index(d)?, d)))
                    .collect::<Result<Vec<_>, BackendError>>()?;
                keyed.sort_by_key(|(i, _)| *i);
                Ok(list_of(keyed.into_iter().map(|(_, d)| d)))
            }
            TaskHint::Dependencies { target, priors } => {
                let t = self.attribute_index(target)?;
                let parents = self.generator.parents_of(t);
                let mut kept = Vec::new();
                for p in priors {
                    if parents.contains(&self.attribute_index(p)?) {
                        kept.push(p);
                    }
                }
                Ok(list_of(kept))
            }
            TaskHint::QueryGeneration { kind, semantics } => Ok(wrap("query", &query_text(*kind, semantics))),
            TaskHint::Decomposition { .. } => Ok(match request.template {
                TemplateId::DiscreteSubquery => wrap("list", &wrap("answer", "no split")),
                _ => wrap("query", "no split"),
            }),
            TaskHint::Estimation { kind, semantics } => {
                let v = self.value(*kind, semantics)?;
                Ok(format!("{}{}", wrap("answer", &v.to_string()), wrap("score", "1")))
            }
            TaskHint::Review { .. } => Ok(wrap("answer", "Yes")),
            TaskHint::Simplify { kind, semantics } => Ok(wrap("query", &query_text(*kind, semantics))),
            TaskHint::Baseline { disclosures } => {
                let facts: Vec<Fact> = disclosures.iter().map(Disclosure::fact).collect();
                let k = self
                    .population
                    .count_matching(&facts)
                    .map_err(|e| BackendError::Oracle(e.to_string()))?;
                Ok(match request.template {
                    TemplateId::BaselinePot => wrap("math", &k.to_string()),
                    _ => wrap("answer", &k.to_string()),
                })
            }
            TaskHint::None => Err(BackendError::Oracle("request carries no task description".into())),
        }
    }
}
