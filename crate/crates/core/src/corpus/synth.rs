//! Template-driven generator of lease-style documents with ground truth for
//! all four review tasks.
//!
//! Each sentence is one snippet under the splitting rules. Duty sentences are
//! "X shall <verb phrase>", definitions reuse "shall" without a duty, and
//! permissions use "may". Duty and permission sentences may carry one of the
//! retrieval topics, and any sentence may open with an entity clause.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_jsonl, Document};
use crate::error::{Error, Result};
use crate::tasks::schema::{
    EntitySpan, LabeledPair, NerAnnotation, ObligationAnnotation, RetrievalAnnotation, SimilarityAnnotation,
    SnippetRef,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub duty_weight: f64,
    pub definition_weight: f64,
    pub permission_weight: f64,
    pub statement_weight: f64,
    /// Probability that a duty or permission sentence answers a question.
    pub topic_rate: f64,
    /// Probability that a sentence opens with an entity clause.
    pub entity_rate: f64,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub paragraph_break_rate: f64,
    pub max_similarity_pairs_per_question: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            duty_weight: 0.24,
            definition_weight: 0.16,
            permission_weight: 0.20,
            statement_weight: 0.40,
            topic_rate: 0.6,
            entity_rate: 0.03,
            min_sentences: 20,
            max_sentences: 40,
            paragraph_break_rate: 0.15,
            max_similarity_pairs_per_question: 200,
        }
    }
}

impl SynthParams {
    fn weights(&self) -> [f64; 4] {
        [self.duty_weight, self.definition_weight, self.permission_weight, self.statement_weight]
    }

    /// Normalized probability of sampling `kind`.
    pub fn kind_share(&self, kind: SentenceKind) -> f64 {
        let w = self.weights();
        w[kind as usize] / w.iter().sum::<f64>()
    }

    fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("sentence weights must be non-negative with positive sum, got {w:?}")));
        }
        for (name, p) in [
            ("topic_rate", self.topic_rate),
            ("entity_rate", self.entity_rate),
            ("paragraph_break_rate", self.paragraph_break_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::Config(format!(
                "sentence range {}..={} is empty",
                self.min_sentences, self.max_sentences
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceKind {
    Duty = 0,
    Definition = 1,
    Permission = 2,
    Statement = 3,
}

const KINDS: [SentenceKind; 4] = [
    SentenceKind::Duty,
    SentenceKind::Definition,
    SentenceKind::Permission,
    SentenceKind::Statement,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicRef {
    pub question: usize,
    pub variant: usize,
}

/// Ground truth for one generated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceMeta {
    pub doc_id: String,
    pub index: usize,
    pub kind: SentenceKind,
    pub topic: Option<TopicRef>,
    pub entities: Vec<EntitySpan>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub sentences: Vec<SentenceMeta>,
    pub retrieval: Vec<RetrievalAnnotation>,
    pub ner: Vec<NerAnnotation>,
    pub similarity: Vec<SimilarityAnnotation>,
    pub obligation: Vec<ObligationAnnotation>,
}

impl SyntheticCorpus {
    /// Writes `documents.jsonl` and one annotation file per task.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("documents.jsonl"), &self.documents)?;
        write_jsonl(&dir.join("sentences.jsonl"), &self.sentences)?;
        write_jsonl(&dir.join("retrieval.jsonl"), &self.retrieval)?;
        write_jsonl(&dir.join("ner.jsonl"), &self.ner)?;
        write_jsonl(&dir.join("similarity.jsonl"), &self.similarity)?;
        write_jsonl(&dir.join("obligation.jsonl"), &self.obligation)
    }
}

struct Topic {
    id: &'static str,
    question: &'static str,
    /// Each variant is one legal point, written several ways.
    variants: &'static [&'static [&'static str]],
}

const TOPICS: &[Topic] = &[
    Topic {
        id: "rent",
        question: "When is the rent due and how is it paid?",
        variants: &[
            &["pay the rent on the first day of each month", "pay monthly rent in advance on the first day of every month"],
            &["pay all rent without any deduction or setoff", "pay the rent free of any offset or deduction whatsoever"],
        ],
    },
    Topic {
        id: "insurance",
        question: "What insurance must be maintained?",
        variants: &[
            &["maintain commercial general liability insurance for the Premises", "carry general liability insurance covering bodily injury"],
            &["maintain property insurance on the Building at full replacement cost", "keep the Building covered by casualty insurance"],
        ],
    },
    Topic {
        id: "repairs",
        question: "Who is responsible for repairs to the property?",
        variants: &[
            &["perform all structural repairs to the roof and foundation", "make structural repairs to the foundation and exterior walls"],
            &["make all interior repairs at its sole cost", "complete interior repairs promptly at its own expense"],
        ],
    },
    Topic {
        id: "assignment",
        question: "Can the tenant assign the lease to another party?",
        variants: &[
            &["assign this Lease only with the prior written consent of Landlord", "assign its interest under this Lease after obtaining written consent"],
            &["assign this Lease to an affiliate without consent", "assign its rights to any affiliate without further approval"],
        ],
    },
    Topic {
        id: "termination",
        question: "On what basis can the parties terminate the lease?",
        variants: &[
            &["terminate this Lease upon a material default that remains uncured", "terminate this Lease if the other party fails to cure a default"],
            &["terminate this Lease upon ninety days written notice", "terminate the Lease by giving ninety days advance written notice"],
        ],
    },
    Topic {
        id: "taxes",
        question: "Does the tenant have the right to challenge tax assessments?",
        variants: &[
            &["contest any real estate tax assessment in good faith", "challenge the tax assessment through appropriate proceedings"],
            &["pay its proportionate share of real estate tax increases", "reimburse the increase in real estate tax over the base year"],
        ],
    },
    Topic {
        id: "notices",
        question: "How must notices be delivered under the agreement?",
        variants: &[
            &["deliver all notices in writing by certified mail", "send notices by certified mail with return receipt requested"],
            &["deliver notices by nationally recognized overnight courier", "give notices through a reputable overnight courier service"],
        ],
    },
    Topic {
        id: "deposit",
        question: "When will the security deposit be returned?",
        variants: &[
            &["return the security deposit within thirty days after expiration", "refund the security deposit within thirty days of the end of the Term"],
            &["apply the security deposit to cure any default", "use the security deposit to remedy any unpaid amounts in default"],
        ],
    },
];

/// Identifier and text of every synthetic question.
pub fn questions() -> Vec<(&'static str, &'static str)> {
    TOPICS.iter().map(|t| (t.id, t.question)).collect()
}

#[derive(Clone, Copy)]
enum ValueKind {
    Company,
    Person,
    Date,
    Money,
    Percent,
    Address,
    Duration,
    Count,
    State,
    Use,
}

struct EntityClass {
    name: &'static str,
    prefix: &'static str,
    suffix: &'static str,
    kind: ValueKind,
}

macro_rules! class {
    ($name:literal, $prefix:literal, $kind:ident, $suffix:literal) => {
        EntityClass {
            name: $name,
            prefix: $prefix,
            suffix: $suffix,
            kind: ValueKind::$kind,
        }
    };
}

/// Ordered from most to least frequent.
const ENTITY_TABLE: [EntityClass; 26] = [
    class!("Landlord", "Under the lease with", Company, "as landlord,"),
    class!("Tenant", "With", Company, "acting as tenant,"),
    class!("CommencementDate", "Commencing on", Date, "as the start date,"),
    class!("BaseRent", "With base charges of", Money, "per month,"),
    class!("PremisesAddress", "For the space located at", Address, "in the city,"),
    class!("ExpirationDate", "Ending on", Date, "at midnight,"),
    class!("LeaseTerm", "For a period of", Duration, "from commencement,"),
    class!("SecurityAmount", "Upon an escrow amount of", Money, "held by the escrow agent,"),
    class!("ExecutionDate", "As executed on", Date, "by both parties,"),
    class!("Guarantor", "As guaranteed by", Company, "under the guaranty,"),
    class!("SquareFootage", "For approximately", Count, "square feet of space,"),
    class!("PermittedUse", "For use as", Use, "and for no other purpose,"),
    class!("RenewalTerm", "With an extension option of", Duration, "more,"),
    class!("GoverningState", "Under the laws of", State, "as governing law,"),
    class!("Broker", "With", Company, "acting as broker,"),
    class!("LateFee", "Subject to a late charge of", Money, "per occurrence,"),
    class!("InterestRate", "With interest accruing at", Percent, "per annum,"),
    class!("NoticePeriod", "Upon", Duration, "of prior written warning,"),
    class!("ParkingSpaces", "With", Count, "reserved parking spaces,"),
    class!("CoverageAmount", "With coverage limits of", Money, "per occurrence,"),
    class!("ExpenseShare", "With a pro rata share of", Percent, "of operating expenses,"),
    class!("BrokerageFee", "With a commission of", Money, "due at signing,"),
    class!("HoldoverRate", "At a holdover charge of", Percent, "of the prior monthly amount,"),
    class!("Plaintiff", "In the action brought by", Company, "as plaintiff,"),
    class!("Defendant", "Against", Company, "as defendant,"),
    class!("Judge", "As ordered by Judge", Person, "of the court,"),
];

/// The entity class names, most frequent first.
pub fn entity_classes() -> Vec<&'static str> {
    ENTITY_TABLE.iter().map(|c| c.name).collect()
}

/// Sampling weight of class `i`; shares fall geometrically from about 20%.
fn entity_weight(i: usize) -> f64 {
    0.8f64.powi(i as i32)
}

const COMPANIES: &[&str] = &[
    "Acme Holdings LLC",
    "Harbor Point Realty",
    "Blue Ridge Partners LP",
    "BlackBerry Limited",
    "Summit Capital Group",
    "Northwind Traders",
    "Granite Street Properties",
    "Oakmont Retail Company",
    "Pioneer Logistics",
    "Riverside Medical Associates",
];
const PEOPLE: &[&str] = &["Maria Lopez", "David Chen", "Sarah Okafor", "James Whitfield", "Elena Petrova", "Robert Kim"];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December",
];
const STREETS: &[&str] = &["Main", "Market", "Madison", "Elm", "Harbor", "Commerce", "Lakeview"];
const STREET_TYPES: &[&str] = &["Street", "Avenue", "Boulevard", "Drive"];
const NUMBER_WORDS: &[(&str, u32)] = &[
    ("two", 2),
    ("three", 3),
    ("five", 5),
    ("ten", 10),
    ("fifteen", 15),
    ("thirty", 30),
    ("sixty", 60),
];
const UNITS: &[&str] = &["years", "months", "days"];
const STATES: &[&str] = &["New York", "California", "Texas", "Delaware", "Illinois", "New Jersey", "Florida"];
const USES: &[&str] = &[
    "general office space",
    "a retail store",
    "a medical office",
    "warehouse and distribution",
    "a restaurant",
];

fn with_commas(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn value(rng: &mut ChaCha8Rng, kind: ValueKind) -> String {
    match kind {
        ValueKind::Company => COMPANIES.choose(rng).unwrap().to_string(),
        ValueKind::Person => PEOPLE.choose(rng).unwrap().to_string(),
        ValueKind::Date => format!(
            "{} {}, {}",
            MONTHS.choose(rng).unwrap(),
            rng.random_range(1..=28),
            rng.random_range(2005..=2030)
        ),
        ValueKind::Money => format!("${}.00", with_commas(rng.random_range(10..5_000) * 50)),
        ValueKind::Percent => {
            if rng.random_bool(0.5) {
                format!("{}%", rng.random_range(1..=20))
            } else {
                format!("{}.{}%", rng.random_range(1..=12), rng.random_range(1..=9))
            }
        }
        ValueKind::Address => format!(
            "{} {} {}",
            rng.random_range(1..=2500),
            STREETS.choose(rng).unwrap(),
            STREET_TYPES.choose(rng).unwrap()
        ),
        ValueKind::Duration => {
            let (w, n) = NUMBER_WORDS.choose(rng).unwrap();
            format!("{w} ({n}) {}", UNITS.choose(rng).unwrap())
        }
        ValueKind::Count => with_commas(rng.random_range(2..=400) * 25),
        ValueKind::State => STATES.choose(rng).unwrap().to_string(),
        ValueKind::Use => USES.choose(rng).unwrap().to_string(),
    }
}

const PARTIES: &[&str] = &["Tenant", "Landlord", "Guarantor", "Each party", "Lessee", "Lessor"];
const GENERIC_ACTS: &[&str] = &[
    "comply with all applicable laws and regulations",
    "keep the Premises clean and free of debris",
    "provide reasonable access to the common areas",
    "indemnify the other party against third party claims",
    "obtain all permits required for its business",
    "maintain accurate books and records",
    "use the Premises only for lawful purposes",
    "cooperate in good faith with the other party",
    "furnish an estoppel certificate upon request",
    "observe the rules of the Building",
];
const TERMS: &[&str] = &[
    "Premises",
    "Building",
    "Term",
    "Operating Expenses",
    "Commencement Date",
    "Permitted Use",
    "Common Areas",
    "Event of Default",
    "Licence Agreements",
    "Alterations",
];
const MEANINGS: &[&str] = &[
    "the portion of the Building described in the attached exhibit",
    "all costs incurred in operating the Property",
    "the period beginning on the Commencement Date and ending on the Expiration Date",
    "collectively, the Trademark Licence and the Technology Licence",
    "any failure to perform a covenant within the applicable cure period",
    "all improvements made to the Premises after the date hereof",
    "the areas of the Property available for common use",
];
const STATEMENTS: &[&str] = &[
    "This Lease is binding upon the parties and their successors.",
    "The headings in this Lease are for convenience only.",
    "This Lease constitutes the entire agreement between the parties.",
    "The Property is located in a mixed use development.",
    "Time is of the essence with respect to this Lease.",
    "The exhibits attached hereto are incorporated by reference.",
    "This Lease may be executed in counterparts.",
    "The invalidity of any provision does not affect the remaining provisions.",
    "All amounts are stated in United States dollars.",
    "The Building contains office and retail space.",
];

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Generated {
    text: String,
    kind: SentenceKind,
    topic: Option<TopicRef>,
    /// Char offsets relative to the sentence.
    entities: Vec<EntitySpan>,
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn sentence(rng: &mut ChaCha8Rng, params: &SynthParams, entity_weights: &[f64]) -> Generated {
    let kind = KINDS[sample_index(rng, &params.weights())];
    let mut topic = None;
    let body = match kind {
        SentenceKind::Duty | SentenceKind::Permission => {
            let party = PARTIES.choose(rng).unwrap();
            let modal = if kind == SentenceKind::Duty { "shall" } else { "may" };
            let act = if rng.random_bool(params.topic_rate) {
                let question = rng.random_range(0..TOPICS.len());
                let variants = TOPICS[question].variants;
                let variant = rng.random_range(0..variants.len());
                topic = Some(TopicRef { question, variant });
                *variants[variant].choose(rng).unwrap()
            } else {
                *GENERIC_ACTS.choose(rng).unwrap()
            };
            format!("{party} {modal} {act}.")
        }
        SentenceKind::Definition => format!(
            "\"{}\" shall mean {}.",
            TERMS.choose(rng).unwrap(),
            MEANINGS.choose(rng).unwrap()
        ),
        SentenceKind::Statement => STATEMENTS.choose(rng).unwrap().to_string(),
    };
    let mut entities = Vec::new();
    let text = if rng.random_bool(params.entity_rate) {
        let class = &ENTITY_TABLE[sample_index(rng, entity_weights)];
        let v = value(rng, class.kind);
        let start = class.prefix.chars().count() + 1;
        entities.push(EntitySpan {
            start,
            end: start + v.chars().count(),
            class: class.name.to_string(),
        });
        let body = if body.starts_with("This ") || body.starts_with("The ") || body.starts_with("Each ") {
            lower_first(&body)
        } else {
            body
        };
        format!("{} {v} {} {body}", class.prefix, class.suffix)
    } else {
        body
    };
    Generated {
        text,
        kind,
        topic,
        entities,
    }
}

/// Deterministic corpus of `num_docs` documents plus ground truth.
pub fn generate_synthetic_corpus(seed: u64, num_docs: usize, params: &SynthParams) -> Result<SyntheticCorpus> {
    if num_docs == 0 {
        return Err(Error::Config("num_docs must be positive".into()));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity_weights: Vec<f64> = (0..ENTITY_TABLE.len()).map(entity_weight).collect();
    let width = num_docs.to_string().len().max(4);

    let mut out = SyntheticCorpus {
        documents: Vec::with_capacity(num_docs),
        sentences: Vec::new(),
        retrieval: Vec::new(),
        ner: Vec::new(),
        similarity: Vec::new(),
        obligation: Vec::new(),
    };
    // question -> answers as (snippet, variant)
    let mut groups: Vec<Vec<(SnippetRef, usize)>> = vec![Vec::new(); TOPICS.len()];

    for d in 0..num_docs {
        let doc_id = format!("synth-{d:0width$}");
        let n = rng.random_range(params.min_sentences..=params.max_sentences);
        let mut text = String::new();
        let mut offset = 0;
        let mut spans = Vec::new();
        let mut answers: Vec<Vec<usize>> = vec![Vec::new(); TOPICS.len()];
        for index in 0..n {
            if index > 0 {
                let sep = if rng.random_bool(params.paragraph_break_rate) { "\n\n" } else { " " };
                text.push_str(sep);
                offset += sep.len();
            }
            let g = sentence(&mut rng, params, &entity_weights);
            let entities: Vec<EntitySpan> = g
                .entities
                .iter()
                .map(|e| EntitySpan {
                    start: e.start + offset,
                    end: e.end + offset,
                    class: e.class.clone(),
                })
                .collect();
            spans.extend(entities.iter().cloned());
            if let Some(t) = g.topic {
                answers[t.question].push(index);
                groups[t.question].push((
                    SnippetRef {
                        doc_id: doc_id.clone(),
                        index,
                    },
                    t.variant,
                ));
            }
            out.obligation.push(ObligationAnnotation {
                doc_id: doc_id.clone(),
                index,
                label: i64::from(g.kind == SentenceKind::Duty),
            });
            offset += g.text.chars().count();
            text.push_str(&g.text);
            out.sentences.push(SentenceMeta {
                doc_id: doc_id.clone(),
                index,
                kind: g.kind,
                topic: g.topic,
                entities,
                text: g.text,
            });
        }
        for (q, idx) in answers.into_iter().enumerate() {
            out.retrieval.push(RetrievalAnnotation {
                doc_id: doc_id.clone(),
                question_id: TOPICS[q].id.to_string(),
                question: TOPICS[q].question.to_string(),
                answer_snippet_indices: idx,
            });
        }
        out.ner.push(NerAnnotation {
            doc_id: doc_id.clone(),
            spans,
        });
        out.documents.push(Document { id: doc_id, text });
    }

    for (q, group) in groups.iter().enumerate() {
        let mut candidates = Vec::new();
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                if group[i].0.doc_id != group[j].0.doc_id {
                    candidates.push((i, j));
                }
            }
        }
        let keep = params.max_similarity_pairs_per_question.min(candidates.len());
        let mut chosen = rand::seq::index::sample(&mut rng, candidates.len(), keep).into_vec();
        chosen.sort_unstable();
        let pairs = chosen
            .into_iter()
            .map(|c| {
                let (i, j) = candidates[c];
                LabeledPair {
                    a: group[i].0.clone(),
                    b: group[j].0.clone(),
                    label: i64::from(group[i].1 == group[j].1),
                }
            })
            .collect();
        out.similarity.push(SimilarityAnnotation {
            question_id: TOPICS[q].id.to_string(),
            pairs,
        });
    }
    Ok(out)
}

/// Count of sentences per kind name.
pub fn kind_counts(sentences: &[SentenceMeta]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for s in sentences {
        let name = match s.kind {
            SentenceKind::Duty => "duty",
            SentenceKind::Definition => "definition",
            SentenceKind::Permission => "permission",
            SentenceKind::Statement => "statement",
        };
        *m.entry(name).or_insert(0) += 1;
    }
    m
}
