//! Seeded generator for the synthetic benchmark.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fact_frequency, Benchmark, CorpusPassage, Entity, EntityKind, FactRecord, PassageLabel, Vocab};
use crate::tinylm::RESERVED_TOKENS;
use crate::{text, Error, ExampleId, Result};

pub struct Relation {
    pub id: &'static str,
    pub subject: EntityKind,
    pub object: EntityKind,
    /// Query template; `{s}` is the subject. Ends with a colon.
    pub query: &'static str,
    /// Entailing sentences; `{s}` subject, `{o}` object.
    pub entail: [&'static str; 3],
}

use EntityKind::*;

pub const RELATIONS: [Relation; 8] = [
    Relation {
        id: "born_in",
        subject: Person,
        object: City,
        query: "{s} was born in the city of:",
        entail: ["{s} was born in {o}.", "The birthplace of {s} is {o}.", "{o} is where {s} was born."],
    },
    Relation {
        id: "citizen_of",
        subject: Person,
        object: Country,
        query: "{s} is a citizen of the following country:",
        entail: ["{s} holds citizenship of {o}.", "{s} is a citizen of {o}.", "{o} issued a passport to its citizen {s}."],
    },
    Relation {
        id: "works_for",
        subject: Person,
        object: Organization,
        query: "{s} works for the following organization:",
        entail: ["{s} works for {o}.", "{s} is employed by {o}.", "{o} employs {s} as a senior engineer."],
    },
    Relation {
        id: "located_in",
        subject: City,
        object: Country,
        query: "{s} is located in the following country:",
        entail: ["{s} is a city in {o}.", "{s} lies within the borders of {o}.", "{o} contains the city of {s}."],
    },
    Relation {
        id: "headquartered_in",
        subject: Organization,
        object: City,
        query: "{s} has its headquarters in the city of:",
        entail: ["{s} is headquartered in {o}.", "The headquarters of {s} are in {o}.", "{o} hosts the main office of {s}."],
    },
    Relation {
        id: "founded_by",
        subject: Organization,
        object: Person,
        query: "{s} was founded by the following person:",
        entail: ["{s} was founded by {o}.", "{o} founded {s}.", "{o} started {s} many years ago."],
    },
    Relation {
        id: "official_language",
        subject: Country,
        object: Language,
        query: "The official language of {s} is:",
        entail: ["People in {s} speak {o}.", "{o} is the official language of {s}.", "Schools in {s} teach in {o}."],
    },
    Relation {
        id: "capital",
        subject: Country,
        object: City,
        query: "The capital city of {s} is:",
        entail: ["{o} is the capital of {s}.", "The capital of {s} is {o}.", "The government of {s} sits in {o}."],
    },
];

const BOTH_TEMPLATES: [&str; 4] = [
    "A long article discussed {s} and {o}.",
    "{s} and {o} appeared in the same news story.",
    "A travel guide mentions {s} and {o} on one page.",
    "The museum catalog lists {s} next to {o}.",
];

fn one_entity_templates(kind: EntityKind) -> &'static [&'static str] {
    match kind {
        Person => &[
            "{e} gave a short speech at the annual meeting.",
            "{e} was seen at the market on a cold morning.",
            "Many people admire {e} for years of hard work.",
        ],
        City => &[
            "{e} has a busy market and many old bridges.",
            "Tourists often visit {e} in the summer.",
            "The streets of {e} were quiet after the rain.",
        ],
        Country => &[
            "{e} has long coastlines and high mountains.",
            "The people of {e} celebrate a spring festival.",
            "{e} exports grain and wool to its neighbors.",
        ],
        Organization => &[
            "{e} published a new annual report.",
            "{e} hired several new workers this year.",
            "A reporter asked {e} about its plans.",
        ],
        Language => &[
            "{e} has a rich tradition of poetry.",
            "Few textbooks are written in {e}.",
            "Scholars study the grammar of {e}.",
        ],
    }
}

const LIST_HEADERS: [&str; 3] = ["See also", "Index of names", "Related entries"];

const FILLERS: [&str; 30] = [
    "The weather was mild that year.",
    "Many visitors came to the old market.",
    "A small river runs past the eastern hills.",
    "The library opens early on weekdays.",
    "Farmers planted wheat before the first frost.",
    "The train station was rebuilt after a fire.",
    "Children played football in the park.",
    "A new bridge was finished last spring.",
    "The museum added a room for maps.",
    "Local bakers sell bread at dawn.",
    "The harbor was crowded with fishing boats.",
    "A festival of music lasted three days.",
    "Snow covered the roads for a week.",
    "The council met to discuss water prices.",
    "Several shops closed during the holiday.",
    "An old clock stands in the main square.",
    "The school choir sang at the wedding.",
    "Prices of fruit rose during the drought.",
    "A storm damaged roofs near the coast.",
    "The painter finished a large portrait.",
    "Workers repaired the road by the mill.",
    "The garden is famous for its roses.",
    "A quiet path leads to the lake.",
    "The newspaper printed a long interview.",
    "Students gathered in the hall at noon.",
    "The radio played songs late into the night.",
    "Tea is served with honey in the cafe.",
    "The orchard produced many apples.",
    "Sailors told stories about the northern sea.",
    "A stone wall surrounds the old town.",
];

const CITY_SUFFIXES: [&str; 8] = ["Harbor", "Falls", "Ridge", "Vale", "Springs", "Point", "Hill", "Crossing"];
const COUNTRY_PREFIXES: [&str; 6] = ["North", "South", "East", "West", "Upper", "New"];
const ORG_SUFFIXES: [&str; 6] = ["Institute", "Group", "Company", "Society", "Works", "Guild"];

/// Name pools are drawn from a fixed stream so that vocabularies agree
/// across benchmark seeds.
const POOL_SEED: u64 = 0x706f_6f6c;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub label: String,
    /// Inclusive range of passages mentioning both entities.
    pub min: usize,
    pub max: usize,
    pub facts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub people: usize,
    pub cities: usize,
    pub countries: usize,
    pub organizations: usize,
    pub languages: usize,
    /// Extra entities per kind that never appear in a fact; subjects of
    /// template-mimicking distractors.
    pub background_entities: usize,
    pub buckets: Vec<BucketSpec>,
    /// Share of each fact's co-mentioning passages that entail it.
    pub entail_fraction: f64,
    pub one_entity_per_fact: usize,
    /// Distractors written in a query template about background subjects.
    pub template_mimics: usize,
    /// Passages made only of filler sentences.
    pub distractors: usize,
    pub max_fillers: usize,
    /// Long comma-separated lists of same-kind fact entities. Subject and
    /// object kinds always differ, so a list never co-mentions a fact.
    pub list_passages: usize,
    /// Inclusive entity-count range of a list passage.
    pub list_entities: [usize; 2],
    /// Entailing passages reuse the query template verbatim.
    pub lexically_aligned: bool,
    /// Word types available to the benchmark (model vocabulary minus reserved ids).
    pub vocab_limit: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let b = |label: &str, min, max, facts| BucketSpec { label: label.into(), min, max, facts };
        BenchmarkSpec {
            seed: 0,
            people: 120,
            cities: 40,
            countries: 15,
            organizations: 30,
            languages: 12,
            background_entities: 20,
            buckets: vec![
                b("1-2", 1, 2, 40),
                b("3-5", 3, 5, 40),
                b("6-10", 6, 10, 40),
                b("11-20", 11, 20, 40),
                b("21-40", 21, 40, 25),
                b("41-80", 41, 80, 15),
            ],
            entail_fraction: 0.6,
            one_entity_per_fact: 3,
            template_mimics: 600,
            distractors: 1000,
            max_fillers: 2,
            list_passages: 800,
            list_entities: [10, 20],
            lexically_aligned: false,
            vocab_limit: 512 - RESERVED_TOKENS,
        }
    }
}

impl BenchmarkSpec {
    pub fn fact_count(&self) -> usize {
        self.buckets.iter().map(|b| b.facts).sum()
    }

    fn count(&self, kind: EntityKind) -> usize {
        match kind {
            Person => self.people,
            City => self.cities,
            Country => self.countries,
            Organization => self.organizations,
            Language => self.languages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.buckets.is_empty() || self.fact_count() == 0 {
            return bad("benchmark.buckets request no facts".into());
        }
        for b in &self.buckets {
            if b.min > b.max {
                return bad(format!("bucket `{}` has min {} > max {}", b.label, b.min, b.max));
            }
        }
        if self.list_passages > 0 && (self.list_entities[0] == 0 || self.list_entities[0] > self.list_entities[1]) {
            return bad(format!("benchmark.list_entities {:?} is not a non-empty range", self.list_entities));
        }
        if !(0.0..=1.0).contains(&self.entail_fraction) {
            return bad(format!("benchmark.entail_fraction {} outside [0, 1]", self.entail_fraction));
        }
        for kind in [Person, City, Country, Organization, Language] {
            if self.count(kind) == 0 {
                return bad(format!("benchmark needs at least one {kind:?} entity"));
            }
        }
        // Each (subject, relation) and each unordered entity pair is used once.
        let capacity: usize = RELATIONS.iter().map(|r| self.count(r.subject).min(self.count(r.subject) * self.count(r.object))).sum();
        if self.fact_count() > capacity {
            return bad(format!(
                "{} facts requested but the entity counts allow at most {capacity} (one object per subject and relation)",
                self.fact_count()
            ));
        }
        Ok(())
    }
}

fn pseudo_words(n: usize, exclude: &HashSet<String>) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut rng = ChaCha8Rng::seed_from_u64(POOL_SEED);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut w = String::new();
        for _ in 0..2 {
            w.push(C[rng.random_range(0..C.len())] as char);
            w.push(V[rng.random_range(0..V.len())] as char);
        }
        if rng.random_bool(0.4) {
            w.push(b"nrsl"[rng.random_range(0..4)] as char);
        }
        if !exclude.contains(&w) && !text::is_stopword(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

struct Pools {
    first: Vec<String>,
    last: Vec<String>,
    city: Vec<String>,
    country: Vec<String>,
    org: Vec<String>,
    language: Vec<String>,
}

const POOL_SIZES: [usize; 6] = [30, 45, 30, 60, 24, 40];

fn pools() -> Pools {
    let mut fixed: Vec<&str> = Vec::new();
    for r in &RELATIONS {
        fixed.push(r.query);
        fixed.extend(r.entail);
    }
    fixed.extend(BOTH_TEMPLATES);
    fixed.extend(FILLERS);
    fixed.extend(LIST_HEADERS);
    fixed.extend(CITY_SUFFIXES);
    fixed.extend(COUNTRY_PREFIXES);
    fixed.extend(ORG_SUFFIXES);
    for k in [Person, City, Country, Organization, Language] {
        fixed.extend(one_entity_templates(k));
    }
    let exclude: HashSet<String> = fixed.iter().flat_map(|t| text::words(t)).collect();
    let all = pseudo_words(POOL_SIZES.iter().sum(), &exclude);
    let mut parts = Vec::new();
    let mut at = 0;
    for n in POOL_SIZES {
        parts.push(all[at..at + n].iter().map(|w| capitalize(w)).collect::<Vec<_>>());
        at += n;
    }
    let mut it = parts.into_iter();
    Pools {
        first: it.next().unwrap(),
        last: it.next().unwrap(),
        city: it.next().unwrap(),
        country: it.next().unwrap(),
        org: it.next().unwrap(),
        language: it.next().unwrap(),
    }
}

/// Draws `n` distinct names from `candidates`.
fn draw(rng: &mut ChaCha8Rng, mut candidates: Vec<Vec<String>>, n: usize, what: &str) -> Result<Vec<Vec<String>>> {
    if candidates.len() < n {
        return Err(Error::Infeasible(format!("{n} {what} requested but only {} distinct names exist", candidates.len())));
    }
    candidates.shuffle(rng);
    candidates.truncate(n);
    Ok(candidates)
}

fn make_entities(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Entity>, Vec<Entity>)> {
    let p = pools();
    let bg = spec.background_entities;
    let pairs = |a: &[String], b: &[String], b_first: bool| -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for x in a {
            for y in b {
                out.push(if b_first {
                    vec![format!("{y} {x}")]
                } else {
                    vec![format!("{x} {y}")]
                });
            }
        }
        out
    };
    let suffixes = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut groups: Vec<(EntityKind, Vec<Vec<String>>)> = Vec::new();
    groups.push((Person, draw(rng, pairs(&p.first, &p.last, false), spec.people + bg, "people")?));
    groups.push((City, draw(rng, pairs(&p.city, &suffixes(&CITY_SUFFIXES), false), spec.cities + bg, "cities")?));
    // Country roots are unique, so the bare root is an unambiguous alias.
    let prefixes = suffixes(&COUNTRY_PREFIXES);
    let mut countries = Vec::new();
    for (i, root) in p.country.iter().enumerate() {
        countries.push(vec![format!("{} {root}", prefixes[i % prefixes.len()]), root.clone()]);
    }
    groups.push((Country, draw(rng, countries, spec.countries + bg, "countries")?));
    groups.push((Organization, draw(rng, pairs(&p.org, &suffixes(&ORG_SUFFIXES), false), spec.organizations + bg, "organizations")?));
    let languages = p.language.iter().map(|r| vec![format!("{r}ic")]).collect();
    groups.push((Language, draw(rng, languages, spec.languages, "languages")?));

    let mut main = Vec::new();
    let mut background = Vec::new();
    let mut id = 0u32;
    for (kind, names) in groups {
        let n = spec.count(kind);
        for (i, aliases) in names.into_iter().enumerate() {
            let e = Entity { id, kind, aliases };
            id += 1;
            if i < n {
                main.push(e);
            } else {
                background.push(e);
            }
        }
    }
    Ok((main, background))
}

fn render(template: &str, s: &str, o: &str) -> String {
    template.replace("{s}", s).replace("{o}", o).replace("{e}", s)
}

fn pick_alias<'a>(rng: &mut ChaCha8Rng, e: &'a Entity) -> &'a str {
    &e.aliases[rng.random_range(0..e.aliases.len())]
}

/// Embeds `core` among up to `max_fillers` filler sentences.
fn with_fillers(rng: &mut ChaCha8Rng, core: Option<String>, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    let mut sentences: Vec<String> = FILLERS.choose_multiple(rng, n).map(|s| s.to_string()).collect();
    if let Some(c) = core {
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(at, c);
    }
    sentences.join(" ")
}

/// Builds the facts and corpus for `spec`. Deterministic in `spec.seed`.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (entities, background) = make_entities(spec, &mut rng)?;
    let by_kind = |pool: &[Entity], k: EntityKind| -> Vec<usize> {
        pool.iter().enumerate().filter(|(_, e)| e.kind == k).map(|(i, _)| i).collect()
    };

    // Facts: bucket slots in order, relations drawn until one has room.
    let mut used_subject: HashSet<(usize, usize)> = HashSet::new();
    let mut used_pair: HashSet<(usize, usize)> = HashSet::new();
    let mut facts = Vec::new();
    let mut plan = Vec::new();
    for bucket in &spec.buckets {
        for _ in 0..bucket.facts {
            let mut order: Vec<usize> = (0..RELATIONS.len()).collect();
            order.shuffle(&mut rng);
            let mut chosen = None;
            'rel: for &r in &order {
                let rel = &RELATIONS[r];
                let mut subjects = by_kind(&entities, rel.subject);
                subjects.shuffle(&mut rng);
                let objects = by_kind(&entities, rel.object);
                for s in subjects {
                    if used_subject.contains(&(s, r)) {
                        continue;
                    }
                    let free: Vec<usize> =
                        objects.iter().copied().filter(|&o| o != s && !used_pair.contains(&(s.min(o), s.max(o)))).collect();
                    if let Some(&o) = free.choose(&mut rng) {
                        chosen = Some((r, s, o));
                        break 'rel;
                    }
                }
            }
            let (r, s, o) = chosen.ok_or_else(|| {
                Error::Infeasible(format!(
                    "no unused (subject, relation) with a fresh object remains after {} facts",
                    facts.len()
                ))
            })?;
            used_subject.insert((s, r));
            used_pair.insert((s.min(o), s.max(o)));
            let rel = &RELATIONS[r];
            let (subject, object) = (entities[s].clone(), entities[o].clone());
            let frequency = rng.random_range(bucket.min..=bucket.max);
            let entailing = if frequency == 0 {
                0
            } else {
                ((frequency as f64 * spec.entail_fraction).round() as usize).clamp(1, frequency)
            };
            plan.push((r, entailing, frequency - entailing));
            facts.push(FactRecord {
                id: facts.len() as u64,
                prompt: render(rel.query, subject.name(), ""),
                target: object.name().to_string(),
                template: rel.query.to_string(),
                relation: rel.id.to_string(),
                subject,
                object,
                bucket: bucket.label.clone(),
                frequency,
            });
        }
    }

    let mut drafts: Vec<(String, PassageLabel)> = Vec::new();
    for (fact, &(r, entailing, both)) in facts.iter().zip(&plan) {
        let rel = &RELATIONS[r];
        for _ in 0..entailing {
            let (s, o) = (pick_alias(&mut rng, &fact.subject), pick_alias(&mut rng, &fact.object));
            let core = if spec.lexically_aligned {
                format!("{} {o}.", render(rel.query, s, ""))
            } else {
                render(rel.entail.choose(&mut rng).expect("non-empty"), s, o)
            };
            let text = with_fillers(&mut rng, Some(core), 0, spec.max_fillers);
            drafts.push((text, PassageLabel::Entails { facts: vec![fact.id] }));
        }
        for _ in 0..both {
            let (s, o) = (pick_alias(&mut rng, &fact.subject), pick_alias(&mut rng, &fact.object));
            let core = render(BOTH_TEMPLATES.choose(&mut rng).expect("non-empty"), s, o);
            drafts.push((with_fillers(&mut rng, Some(core), 0, spec.max_fillers), PassageLabel::BothEntities { fact: fact.id }));
        }
        for i in 0..spec.one_entity_per_fact {
            let e = if i % 2 == 0 { &fact.subject } else { &fact.object };
            let core = render(one_entity_templates(e.kind).choose(&mut rng).expect("non-empty"), pick_alias(&mut rng, e), "");
            drafts.push((with_fillers(&mut rng, Some(core), 0, spec.max_fillers), PassageLabel::OneEntity { entity: e.id }));
        }
    }
    for _ in 0..spec.template_mimics {
        let rel = RELATIONS.choose(&mut rng).expect("non-empty");
        let subjects = by_kind(&background, rel.subject);
        let objects = by_kind(&entities, rel.object);
        let (Some(&s), Some(&o)) = (subjects.choose(&mut rng), objects.choose(&mut rng)) else {
            return Err(Error::Infeasible(format!(
                "template mimics for `{}` need a background {:?} entity",
                rel.id, rel.subject
            )));
        };
        let core = format!("{} {}.", render(rel.query, pick_alias(&mut rng, &background[s]), ""), pick_alias(&mut rng, &entities[o]));
        drafts.push((with_fillers(&mut rng, Some(core), 0, spec.max_fillers), PassageLabel::Distractor));
    }
    for _ in 0..spec.distractors {
        drafts.push((with_fillers(&mut rng, None, 1, spec.max_fillers + 1), PassageLabel::Distractor));
    }
    for _ in 0..spec.list_passages {
        let kind = *[Person, City, Country, Organization, Language].choose(&mut rng).expect("non-empty");
        let pool = by_kind(&entities, kind);
        let n = rng.random_range(spec.list_entities[0]..=spec.list_entities[1]).min(pool.len());
        let names: Vec<&str> = pool.choose_multiple(&mut rng, n).map(|&i| pick_alias(&mut rng, &entities[i])).collect();
        drafts.push((format!("{}: {}.", LIST_HEADERS.choose(&mut rng).expect("non-empty"), names.join(", ")), PassageLabel::Distractor));
    }
    drafts.shuffle(&mut rng);

    let texts = drafts.iter().map(|(t, _)| t.as_str()).chain(facts.iter().flat_map(|f| [f.prompt.as_str(), f.target.as_str()]));
    let vocab = Vocab::from_texts(texts);
    if vocab.size() - RESERVED_TOKENS > spec.vocab_limit {
        return Err(Error::Infeasible(format!(
            "corpus uses {} word types, benchmark.vocab_limit is {}",
            vocab.size() - RESERVED_TOKENS,
            spec.vocab_limit
        )));
    }
    let passages: Vec<CorpusPassage> = drafts
        .into_iter()
        .enumerate()
        .map(|(i, (text, label))| CorpusPassage { id: ExampleId(i as u64), token_ids: vocab.encode(&text), text, label })
        .collect();

    // The construction must hit every planned co-mention count exactly.
    let texts: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
    for f in &facts {
        let measured = fact_frequency(texts.iter().copied(), f);
        if measured != f.frequency {
            return Err(Error::Infeasible(format!(
                "fact {} planned {} co-mentions but the corpus has {measured}",
                f.id, f.frequency
            )));
        }
    }
    Ok(Benchmark { facts, passages, vocab })
}

/// Count of facts per bucket label.
pub fn bucket_counts(facts: &[FactRecord]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for f in facts {
        *out.entry(f.bucket.clone()).or_insert(0) += 1;
    }
    out
}
