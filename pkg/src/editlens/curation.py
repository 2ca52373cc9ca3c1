"""Dataset curation: persona sampling, relevance filtering, instruction
generation, validation, and assembly.

Every image travels through: a persona drawn uniformly from the 10x10
feature space, a per-category relevance check, one generation call that
produces a paired abstract prompt (<= 15 words) and explicit specification
per relevant category plus one self-invented "NEW_" category, per-category
validation (word limit, entity retention, sentence atomicity), and finally
deterministic dataset assembly with an optional stratified train split.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .model import (
    CategoryRef,
    CategorySpec,
    DatasetManifest,
    DecodeError,
    Domain,
    EditLensError,
    ExplicitSpec,
    ImageRef,
    Persona,
    Sample,
    Split,
    build_manifest,
    content_hash,
    normalize_entity,
    save_dataset,
    word_count,
)
from .rubric import extract_envelope

logger = logging.getLogger(__name__)

__all__ = [
    "CuratedItem",
    "CurationError",
    "FEATURE_ORDER",
    "FeatureSpace",
    "GenerationResult",
    "PERSONA_TEMPLATE",
    "allocate_counts",
    "assemble_dataset",
    "check_relevance",
    "curate_images",
    "generate_instructions",
    "load_categories",
    "load_feature_space",
    "render_persona_system_prompt",
    "sample_persona",
    "validate_generation",
]


class CurationError(EditLensError):
    pass


# ---------------------------------------------------------------------------
# Persona feature space
# ---------------------------------------------------------------------------

FEATURE_ORDER = (
    "Age",
    "Country",
    "Gender",
    "Hobby",
    "Profession",
    "Tech Skill",
    "Visual Lang",
    "Personality",
    "Name",
    "Motivation",
)

_FEATURE_TO_FIELD = {
    "Age": "age_group",
    "Country": "country",
    "Gender": "gender",
    "Hobby": "hobby",
    "Profession": "profession",
    "Tech Skill": "tech_skill",
    "Visual Lang": "visual_language",
    "Personality": "personality",
    "Name": "name",
    "Motivation": "motivation",
}


@dataclass(frozen=True)
class FeatureSpace:
    """Ten named features with exactly ten unique string values each."""

    features: dict

    def __post_init__(self) -> None:
        missing = set(FEATURE_ORDER) - set(self.features)
        if missing:
            raise CurationError(f"feature space missing features: {sorted(missing)}")
        for name in FEATURE_ORDER:
            values = self.features[name]
            if len(values) != 10:
                raise CurationError(f"feature {name!r} has {len(values)} values; expected 10")
            if len(set(values)) != len(values):
                raise CurationError(f"feature {name!r} has duplicate values")

    @property
    def cardinality(self) -> int:
        n = 1
        for name in FEATURE_ORDER:
            n *= len(self.features[name])
        return n


def _read_packaged(filename: str) -> str:
    return resources.files("editlens.data").joinpath(filename).read_text(encoding="utf-8")


def load_feature_space(path: Path | str | None = None) -> FeatureSpace:
    """Load the persona feature space; defaults to the packaged lists."""
    text = Path(path).read_text(encoding="utf-8") if path else _read_packaged("feature_space.json")
    raw = json.loads(text)
    return FeatureSpace(features={k: tuple(v) for k, v in raw.items()})


def load_categories(path: Path | str | None = None) -> list[CategorySpec]:
    """Load category guidelines; defaults to the packaged registry.

    Category names must be unique and every domain must be one of the four
    known domains. The number of categories is data, not a constant.
    """
    text = Path(path).read_text(encoding="utf-8") if path else _read_packaged("categories.json")
    raw = json.loads(text)
    categories = [CategorySpec.from_dict(c, f"categories[{i}]") for i, c in enumerate(raw)]
    names = [c.name for c in categories]
    if len(set(names)) != len(names):
        raise CurationError("duplicate category names in registry")
    return categories


def sample_persona(feature_space: FeatureSpace, rng_seed: int) -> Persona:
    """One uniform draw per feature, in the fixed feature order; replayable."""
    rng = random.Random(rng_seed)
    fields = {}
    for feature in FEATURE_ORDER:
        fields[_FEATURE_TO_FIELD[feature]] = rng.choice(feature_space.features[feature])
    return Persona(**fields)


PERSONA_TEMPLATE = (
    "You are an expert image editing assistant. You currently simulate how a user "
    "named {name} from {country}—a {age} {gender} who works as a {profession} "
    "and enjoys {hobby}—would generate creative abstract editing instructions. "
    "This user is a {tech_skill} motivated by {motivation}. They describe things "
    "using a {visual_lang} visual language and have a {personality} personality."
)

_SLOT_RE = re.compile(
    r"\{(name|country|age|gender|profession|hobby|tech_skill|motivation|visual_lang|personality)\}"
)


def render_persona_system_prompt(persona: Persona) -> str:
    """Fill the persona template in a single pass.

    Single-pass substitution keeps braces inside slot values literal: a value
    containing "{name}" is never re-expanded.
    """
    values = {
        "name": persona.name,
        "country": persona.country,
        "age": persona.age_group,
        "gender": persona.gender,
        "profession": persona.profession,
        "hobby": persona.hobby,
        "tech_skill": persona.tech_skill,
        "motivation": persona.motivation,
        "visual_lang": persona.visual_language,
        "personality": persona.personality,
    }
    return _SLOT_RE.sub(lambda m: values[m.group(1)], PERSONA_TEMPLATE)


# ---------------------------------------------------------------------------
# Relevance check
# ---------------------------------------------------------------------------

RELEVANCE_TEMPLATE = """\
Role: Image Relevance Checker

Decide whether the requirement of an editing category holds for the given image.

Category: {category}
Requirement: {requirement}
Entities detected in the image: {entities}

Answer with a single JSON object: {{"relevant": true or false, "reason": "short justification"}}
Return only the JSON object.
"""


def _slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def _parse_verdict(raw: str) -> tuple[bool, str]:
    envelope = extract_envelope(raw)
    if envelope.payload is None:
        raise DecodeError("", "; ".join(envelope.diagnostics))
    relevant = envelope.payload.get("relevant")
    if not isinstance(relevant, bool):
        raise DecodeError("relevant", "expected boolean")
    reason = envelope.payload.get("reason", "")
    if not isinstance(reason, str):
        raise DecodeError("reason", "expected string")
    return relevant, reason


def check_relevance(
    gateway: Gateway,
    image: ImageRef,
    entities: Sequence[str],
    category: CategorySpec,
    base_dir: Path | str | None = None,
    no_cache: bool = False,
) -> tuple[bool, str]:
    """Ask the provider whether the category requirement holds for the image.

    An unparseable verdict triggers one repair completion; a second failure
    is treated as not relevant and logged.
    """
    if category.requirement is None:
        return True, "category has no requirement predicate"
    path = image.resolve(base_dir)
    stem = Path(image.path).stem
    system = RELEVANCE_TEMPLATE.format(
        category=f"{category.domain.value}-{category.name}",
        requirement=category.requirement,
        entities=", ".join(entities),
    )
    request = ChatRequest(
        system_text=system,
        user_parts=(ImagePart(str(path)),),
        response_format="json",
        fixture_id=f"relevance/{stem}/{_slugify(category.name)}",
    )
    raw = gateway.complete(request, no_cache=no_cache)
    try:
        return _parse_verdict(raw)
    except DecodeError as first:
        repair = ChatRequest(
            system_text=system,
            user_parts=request.user_parts
            + (
                TextPart(
                    f"Your previous reply could not be parsed. Parse diagnostics: {first}\n"
                    "Return only the corrected object."
                ),
            ),
            response_format="json",
            fixture_id=f"{request.fixture_id}/repair",
        )
        try:
            return _parse_verdict(gateway.complete(repair, no_cache=no_cache))
        except DecodeError:
            logger.warning(
                "relevance verdict unparseable for %s / %s; treating as not relevant",
                image.path,
                category.name,
            )
            return False, "unparseable"


# ---------------------------------------------------------------------------
# Instruction generation
# ---------------------------------------------------------------------------

GENERATION_TEMPLATE = """\
{persona} Your goal is to generate creative and detailed editing
instructions for an image based on a set of approved categories. Your goal
is also to translate creative, high-level ideas (**Abstract Prompts**) into
specific, technical, and deterministic steps (**Explicit Instructions**).
Each response must be sampled at random from the distribution.

## CONTEXT
- **Image Entities**: You will be given a list of entities detected in the
image: {entities}. You can detect additional entities if you
think they are relevant for the edit, but you cannot remove any of the
provided entities.
- **Relevant Categories**: You will be given a list of categories, each with
an example of a high-level creative prompt.

## YOUR TASK
Your overall task is to generate editing instructions for a list of categories.
This list includes all of the `Relevant Categories` provided to you, **PLUS one
new, creative category of your own invention (the category name will start
with NEW_ prefix)** that you believe is a good fit for the image.
For **EACH** category in this combined list (both provided and self-generated),
you must generate a complete set of editing instructions by following these steps:

1. **Create an Abstract Prompt (The "What")**: Write a new, creative, and
high-level prompt inspired by the category's theme. This defines the overall
'vibe' of the edit. The instruction must be open to interpretation in terms of
How exactly to achieve it, I.e, different people will interpret it differently.
2. **Probablity Sampling**: Ensure that each generated response is sampled
randomly from the distribution.
3. **Define Entity-Specific Edits (The "How")**:
    - **Discovery**: Actively identify more relevant entities in the image or
    context that were not provided in the {entities} list. Include them in
    your explicit list.
        For each relevant `Image Entity`, determine its role in the edit. This
        is the technical process. It is precise, measurable, and leaves no
        room for interpretation. It focuses on concrete properties:
        Write a clear, precise, and actionable instruction for the entity with
        specific guidance. Keep it blank if no change is needed to the entity
        to advance the alignment to abstract prompt.
        -- **Granularity**: Relate to the relevant entity components (e.g., for
        a 'person', specify edits for their clothing, hair, and posture in
        separate sentences).
        -- **Density**: Aim for a high density of edits. Each sentence must
        contain exactly ONE technical change. Multiple sentences can be
        generated for the same entity as long as they refer to different
        components or aspects of edit of the entity.
        -- **Technical Properties**: Use specific values: "Increase roughness
        to 80", "Add 15".
4. **Define a General Instruction**: Write instructions that describes any
global changes to the image's overall e.g., style, lighting, mood, or color
palette. This applies to the entire scene.
5. **Insertion/Removal Entities**: You may suggest new entities to be
inserted in the image to better align with the abstract prompt as an explicit
instruction specifying the entity and its placement.
    These should be realistic and contextually appropriate. If no
    insertions/removals are needed, leave this blank.
    For each insertion, you MUST provide coordinates or relative placement
    (e.g., "Place a [Object] 10cm to the left of [Entity] at a 30-degree angle").

## OUTPUT REQUIREMENTS
- You **must** process every category provided in the input.
- You MUST return your complete analysis of all categories as a single JSON
object of the form:
  {{"results": [{{"category": "<Domain>-<Name> or NEW_<name>",
    "abstract_prompt": "string",
    "entity_edits": [{{"entity": "string", "instructions": ["one atomic sentence", "..."]}}],
    "general_instruction": "string",
    "insertions": [{{"entity": "string", "placement": "string"}}]}}]}}
- You must ensure diversity in your generated prompts by sampling randomly
from the distribution.
- Each abstract prompt must not be longer than 15 words, and has to keep its
abstractness while being specific to the image content and user context.
- Each abstract prompt has to look like user-generated by the persona mentioned
in the beginning, suitable for them using a mobile phone on the go, trying to
quickly convey a creative idea.
- Your generated **explicit instructions** and **general instruction** must
**NEVER** use subjective or interpretive words. only specific technical clear
words for specific change.
- High-density output is mandatory: provide as many specific, atomic
instructions as possible per entity.
- Avoid adjectives like "whimsical", "vast", "vibrant", which are not
user-common.

**Begin your analysis for the following categories. Examples are provided only
for inspiration. Do not use them as templates. Follow each category guidelines:**
{categories}
"""


@dataclass(frozen=True)
class GenerationResult:
    """One category's generated pair, prior to validation."""

    category_label: str
    abstract_prompt: str
    explicit: ExplicitSpec
    synthetic: bool
    domain: Domain | None = None


def _render_categories(categories: Sequence[CategorySpec]) -> str:
    lines = []
    for cat in categories:
        line = f"- **{cat.domain.value}-{cat.name}**: {cat.guideline}"
        if cat.requirement:
            line += f" Requirement: {cat.requirement}"
        lines.append(line)
    return "\n".join(lines)


def build_generation_prompt(
    persona: Persona,
    image: ImageRef,
    entities: Sequence[str],
    categories: Sequence[CategorySpec],
    base_dir: Path | str | None = None,
) -> ChatRequest:
    path = image.resolve(base_dir)
    system = GENERATION_TEMPLATE.format(
        persona=render_persona_system_prompt(persona),
        entities=", ".join(entities),
        categories=_render_categories(categories),
    )
    return ChatRequest(
        system_text=system,
        user_parts=(ImagePart(str(path)),),
        response_format="json",
        fixture_id=f"generate/{Path(image.path).stem}",
    )


_SENTENCE_SPLIT = re.compile(r"[.!?]+")


def _is_atomic(sentence: str) -> bool:
    """Syntactic atomicity: one sentence, no 'and then' coordination."""
    text = sentence.strip()
    if not text or "\n" in text:
        return False
    if re.search(r"\band then\b", text, re.IGNORECASE):
        return False
    segments = [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]
    return len(segments) <= 1


def validate_generation(result: GenerationResult, provided_entities: Sequence[str]) -> list[str]:
    """All constraint violations for one generated category (empty means ok)."""
    problems: list[str] = []
    words = word_count(result.abstract_prompt)
    if words > 15:
        problems.append(f"abstract prompt has {words} words; limit is 15")
    kept = {normalize_entity(e.entity) for e in result.explicit.entity_edits}
    for entity in provided_entities:
        if normalize_entity(entity) not in kept:
            problems.append(f"provided entity {entity!r} removed from explicit list")
    has_content = (
        any(e.instructions for e in result.explicit.entity_edits)
        or result.explicit.general_instruction.strip()
        or result.explicit.insertions
    )
    if not has_content:
        problems.append("explicit spec is empty")
    for edit in result.explicit.entity_edits:
        for sentence in edit.instructions:
            if not _is_atomic(sentence):
                problems.append(f"non-atomic instruction for {edit.entity!r}: {sentence!r}")
    return problems


def _parse_generation(raw: str, categories: Sequence[CategorySpec]) -> list[GenerationResult]:
    envelope = extract_envelope(raw)
    if envelope.payload is None:
        raise DecodeError("", "; ".join(envelope.diagnostics))
    block = envelope.payload.get("results")
    if not isinstance(block, list):
        raise DecodeError("results", "missing or non-list results field")
    by_label: dict[str, CategorySpec] = {}
    for cat in categories:
        by_label[cat.name] = cat
        by_label[f"{cat.domain.value}-{cat.name}"] = cat
    results: list[GenerationResult] = []
    for i, item in enumerate(block):
        path = f"results[{i}]"
        if not isinstance(item, dict):
            raise DecodeError(path, "expected object")
        label = item.get("category")
        if not isinstance(label, str) or not label.strip():
            raise DecodeError(f"{path}.category", "missing category label")
        abstract = item.get("abstract_prompt")
        if not isinstance(abstract, str):
            raise DecodeError(f"{path}.abstract_prompt", "expected string")
        explicit = ExplicitSpec.from_dict(
            {
                "entity_edits": item.get("entity_edits", []),
                "general_instruction": item.get("general_instruction", ""),
                "insertions": item.get("insertions", []),
            },
            path,
        )
        synthetic = label.startswith("NEW_")
        domain: Domain | None = None
        if synthetic:
            raw_domain = item.get("domain")
            if isinstance(raw_domain, str):
                try:
                    domain = Domain(raw_domain)
                except ValueError:
                    domain = None
        else:
            spec = by_label.get(label)
            if spec is None:
                logger.warning("%s: unknown category %r; dropped", path, label)
                continue
            domain = spec.domain
            label = spec.name
        results.append(
            GenerationResult(
                category_label=label,
                abstract_prompt=abstract,
                explicit=explicit,
                synthetic=synthetic,
                domain=domain,
            )
        )
    return results


def generate_instructions(
    gateway: Gateway,
    image: ImageRef,
    entities: Sequence[str],
    relevant_categories: Sequence[CategorySpec],
    persona: Persona,
    base_dir: Path | str | None = None,
    no_cache: bool = False,
) -> list[GenerationResult]:
    """One provider call for all relevant categories; per-category validation.

    Categories failing validation are dropped with a log entry; a whole-call
    parse failure is repaired once and then raised.
    """
    if not relevant_categories:
        raise CurationError("no relevant categories for generation")
    request = build_generation_prompt(persona, image, entities, relevant_categories, base_dir)
    raw = gateway.complete(request, no_cache=no_cache)
    try:
        parsed = _parse_generation(raw, relevant_categories)
    except DecodeError as first:
        repair = ChatRequest(
            system_text=request.system_text,
            user_parts=request.user_parts
            + (
                TextPart(
                    f"Your previous reply could not be parsed. Parse diagnostics: {first}\n"
                    "Return only the corrected object."
                ),
            ),
            response_format="json",
            fixture_id=f"{request.fixture_id}/repair",
        )
        try:
            parsed = _parse_generation(gateway.complete(repair, no_cache=no_cache), relevant_categories)
        except DecodeError as second:
            raise CurationError(
                f"generation unparseable for {image.path}: {first}; after repair: {second}"
            ) from None

    valid: list[GenerationResult] = []
    for result in parsed:
        problems = validate_generation(result, entities)
        if problems:
            logger.warning(
                "dropping category %r for %s: %s",
                result.category_label,
                image.path,
                "; ".join(problems),
            )
            continue
        valid.append(result)
    return valid


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CuratedItem:
    """A validated generation joined with its image, entities, and persona."""

    image: ImageRef
    entities: tuple[str, ...]
    persona: Persona
    result: GenerationResult


def allocate_counts(proportions: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder allocation of `total` across keys.

    Proportions are normalized first, so inputs that do not sum exactly to 1
    (e.g. rounded percentages) still allocate the full total; each count is
    within 1 of its normalized quota.
    """
    if total < 0:
        raise CurationError("total must be non-negative")
    weight = sum(proportions.values())
    if weight <= 0:
        raise CurationError("proportions must have positive sum")
    quotas = {k: total * (v / weight) for k, v in proportions.items()}
    counts = {k: int(q) for k, q in quotas.items()}
    remainder = total - sum(counts.values())
    by_fraction = sorted(quotas, key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in by_fraction[:remainder]:
        counts[k] += 1
    return counts


def assemble_dataset(
    items: Sequence[CuratedItem],
    out_dir: Path | str,
    train_proportions: Mapping[str, float] | None = None,
    train_total: int | None = None,
    seed: int = 0,
) -> tuple[list[Sample], DatasetManifest]:
    """Write samples (unique ids, duplicate (image, category) pairs skipped)
    plus the manifest; optionally mark a stratified train split by domain.

    Samples default to the test split with `verified` false; the pipeline
    never auto-verifies. Synthetic (NEW_) categories keep their flag, default
    to the Logical domain, and are excluded from the stratified train draw.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples: list[Sample] = []
    seen_pairs: set[tuple[str, str]] = set()
    seen_ids: set[str] = set()
    for item in sorted(items, key=lambda it: (it.image.path, it.result.category_label)):
        result = item.result
        pair = (item.image.path, result.category_label)
        if pair in seen_pairs:
            logger.warning("duplicate (image, category) pair skipped: %s", pair)
            continue
        seen_pairs.add(pair)
        stem = Path(item.image.path).stem
        sample_id = f"{_slugify(stem)}--{_slugify(result.category_label)}"
        if sample_id in seen_ids:
            raise CurationError(f"sample id collision: {sample_id}")
        seen_ids.add(sample_id)
        domain = result.domain or Domain.LOGICAL
        samples.append(
            Sample(
                sample_id=sample_id,
                context_image=item.image,
                source_entities=item.entities,
                category=CategoryRef(domain=domain, name=result.category_label),
                persona=item.persona,
                abstract_prompt=result.abstract_prompt,
                explicit_spec=result.explicit,
                split=Split.TEST,
                verified=False,
                synthetic_category=result.synthetic,
            )
        )

    if not samples:
        logger.warning("assembling an empty dataset")

    if train_proportions is not None and train_total is not None:
        counts = allocate_counts(train_proportions, train_total)
        pools: dict[str, list[int]] = {}
        for idx, sample in enumerate(samples):
            if not sample.synthetic_category:
                pools.setdefault(sample.category.domain.value, []).append(idx)
        rng = random.Random(seed)
        chosen: list[int] = []
        for domain_name in sorted(counts):
            want = counts[domain_name]
            pool = pools.get(domain_name, [])
            if len(pool) < want:
                raise CurationError(
                    f"train split needs {want} {domain_name} samples; only {len(pool)} available"
                )
            chosen.extend(rng.sample(pool, want))
        for idx in chosen:
            samples[idx] = dataclasses.replace(samples[idx], split=Split.TRAIN)

    save_dataset(samples, out / "samples.jsonl")
    manifest = build_manifest(samples)
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return samples, manifest


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp", ".gif")


def _per_image_seed(seed: int, stem: str) -> int:
    digest = content_hash(f"{seed}:{stem}".encode("utf-8"))
    return int(digest[:16], 16)


def curate_images(
    gateway: Gateway,
    images_dir: Path | str,
    categories: Sequence[CategorySpec],
    feature_space: FeatureSpace,
    seed: int,
    no_cache: bool = False,
) -> list[CuratedItem]:
    """Run the full per-image pipeline over an image directory.

    Each image needs an `<stem>.entities.json` sidecar (a JSON list of entity
    names). Personas derive from a per-image seed mixed from the master seed
    and the image stem, so adding or removing images never reshuffles others.
    """
    images_dir = Path(images_dir)
    items: list[CuratedItem] = []
    image_paths = sorted(
        p for p in images_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES and p.is_file()
    )
    for path in image_paths:
        sidecar = path.with_name(f"{path.stem}.entities.json")
        if not sidecar.exists():
            logger.warning("no entity sidecar for %s; skipped", path.name)
            continue
        entities = json.loads(sidecar.read_text(encoding="utf-8"))
        if not isinstance(entities, list) or not all(isinstance(e, str) for e in entities):
            raise CurationError(f"{sidecar}: sidecar must be a JSON list of entity names")
        image = ImageRef(path=str(path), sha256=content_hash(path.read_bytes()))
        persona = sample_persona(feature_space, _per_image_seed(seed, path.stem))
        relevant = []
        for category in categories:
            ok, reason = check_relevance(gateway, image, entities, category, no_cache=no_cache)
            if ok:
                relevant.append(category)
            else:
                logger.info("category %r not relevant for %s: %s", category.name, path.name, reason)
        if not relevant:
            logger.warning("no relevant categories for %s; skipped", path.name)
            continue
        results = generate_instructions(
            gateway, image, entities, relevant, persona, no_cache=no_cache
        )
        for result in results:
            items.append(
                CuratedItem(
                    image=image, entities=tuple(entities), persona=persona, result=result
                )
            )
    return items
