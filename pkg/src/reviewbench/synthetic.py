"""Synthetic review/metadata corpora with a known context-to-item relation.

Each item carries a few latent attributes. Metadata names an attribute with
its catalogue word; reviews mostly describe it with one of several
colloquial synonyms, so a lexical matcher sees little overlap while a model
trained on (review, metadata) pairs can learn the mapping. Attributes are
shared across domains, with each domain favouring its own subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from reviewbench.corpus import ItemMeta, Review
from reviewbench.evalbench import EvalQuery
from reviewbench.pipeline import TrainingPair, context_text, metadata_text

DOMAINS = ("Video_Games", "All_Beauty", "Baby_Products", "Office_Products")

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]

_REVIEW_FILLER = ("really", "very", "quite", "so", "honestly", "definitely", "great", "nice", "love", "works",
                  "happy", "bought", "using", "would", "recommend", "again", "my", "it", "this", "the", "and")
_META_FILLER = ("premium", "quality", "design", "edition", "series", "pack", "set", "model", "new", "with")


def _words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(2, 4))))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class SyntheticWorld:
    domains: tuple[str, ...]
    catalogue: list[str]             # attribute -> metadata word
    synonyms: list[list[str]]        # attribute -> review words
    brands: list[str]
    item_ids: list[str]
    item_domain: list[str]
    item_attrs: list[list[int]]
    item_brand: list[int]
    lexical_rate: float

    def meta(self, i: int) -> ItemMeta:
        attrs = self.item_attrs[i]
        filler = _META_FILLER[i % len(_META_FILLER)]
        title = f"{self.brands[self.item_brand[i]]} {self.catalogue[attrs[0]]} {filler} {self.item_ids[i].lower()}"
        features = tuple(f"{self.catalogue[a]} {_META_FILLER[(i + j) % len(_META_FILLER)]}"
                         for j, a in enumerate(attrs[1:]))
        description = (" ".join(self.catalogue[a] for a in attrs) + " for everyday use",)
        return ItemMeta(self.item_ids[i], self.item_domain[i], title, features, description)

    def metadata(self) -> list[ItemMeta]:
        return [self.meta(i) for i in range(len(self.item_ids))]

    def review_text(self, i: int, rng: np.random.Generator) -> tuple[str, str]:
        attrs = list(self.item_attrs[i])
        rng.shuffle(attrs)
        words = []
        for a in attrs[:max(2, len(attrs) - 1)]:
            if rng.random() < self.lexical_rate:
                words.append(self.catalogue[a])
            else:
                words.append(self.synonyms[a][int(rng.integers(len(self.synonyms[a])))])
            words.extend(rng.choice(_REVIEW_FILLER, size=2).tolist())
        title = " ".join(rng.choice(_REVIEW_FILLER, size=2).tolist())
        text = " ".join(words) + " " + " ".join(rng.choice(_REVIEW_FILLER, size=4).tolist())
        return title, text


def make_world(n_items: int = 200, domains=DOMAINS, n_attributes: int = 120, attrs_per_item: int = 4,
               n_synonyms: int = 3, domain_share: float = 0.4, lexical_rate: float = 0.1,
               seed: int = 0) -> SyntheticWorld:
    """Build a world where domain ``d`` draws attributes mostly from its own slice of the vocabulary.

    ``domain_share`` of every domain's attributes come from the common pool,
    the rest from the domain's own slice.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set(_REVIEW_FILLER) | set(_META_FILLER)
    catalogue = _words(rng, n_attributes, taken)
    synonyms = [_words(rng, n_synonyms, taken) for _ in range(n_attributes)]
    brands = _words(rng, 12, taken)
    slices = np.array_split(np.arange(n_attributes), len(domains))
    item_ids, item_domain, item_attrs, item_brand = [], [], [], []
    for i in range(n_items):
        d = i % len(domains)
        attrs = []
        while len(attrs) < attrs_per_item:
            if rng.random() < domain_share:
                a = int(rng.integers(n_attributes))
            else:
                a = int(rng.choice(slices[d]))
            if a not in attrs:
                attrs.append(a)
        item_ids.append(f"B{seed:02d}{i:06d}")
        item_domain.append(domains[d])
        item_attrs.append(attrs)
        item_brand.append(int(rng.integers(len(brands))))
    return SyntheticWorld(tuple(domains), catalogue, synonyms, brands, item_ids, item_domain, item_attrs,
                          item_brand, lexical_rate)


def make_pairs(world: SyntheticWorld, n_pairs: int = 2000, seed: int = 1) -> list[TrainingPair]:
    rng = np.random.default_rng(seed)
    metas = world.metadata()
    pairs = []
    for n in range(n_pairs):
        i = n % len(metas)
        title, text = world.review_text(i, rng)
        context = f"{title} {text}".strip()
        pairs.append(TrainingPair(context, metadata_text(metas[i]), metas[i].item_id, metas[i].domain, n))
    return pairs


def make_queries(world: SyntheticWorld, per_item: int = 2, seed: int = 2,
                 domains: set[str] | None = None) -> list[EvalQuery]:
    rng = np.random.default_rng(seed)
    out = []
    for i, item in enumerate(world.item_ids):
        for j in range(per_item):
            title, text = world.review_text(i, rng)
            if domains is None or world.item_domain[i] in domains:
                out.append(EvalQuery(f"q{i:06d}_{j}", f"{title} {text}", item, world.item_domain[i]))
    return out


def make_reviews(world: SyntheticWorld, n_reviews: int = 2000, n_users: int = 150, seed: int = 3,
                 start_ms: int = 1_600_000_000_000, step_ms: int = 3_600_000) -> list[Review]:
    """Reviews with distinct, increasing timestamps; about half are 5-star."""
    rng = np.random.default_rng(seed)
    reviews = []
    t = start_ms
    for n in range(n_reviews):
        i = int(rng.integers(len(world.item_ids)))
        title, text = world.review_text(i, rng)
        if rng.random() < 0.5:
            # long enough to be a query source
            text = text + " " + " ".join(rng.choice(_REVIEW_FILLER, size=14).tolist())
        t += int(rng.integers(1, step_ms))
        reviews.append(Review(
            user_id=f"U{int(rng.integers(n_users)):05d}",
            item_id=world.item_ids[i],
            rating=float(5.0 if rng.random() < 0.5 else rng.integers(1, 5)),
            title=title,
            text=text,
            timestamp=t,
            domain=world.item_domain[i],
        ))
    return reviews


def write_corpus(directory, world: SyntheticWorld, reviews: list[Review]) -> dict[str, list[Path]]:
    """Write ``<Domain>.jsonl`` review files and ``meta_<Domain>.jsonl`` metadata files (released layout)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths: dict[str, list[Path]] = {"reviews": [], "metadata": []}
    for domain in world.domains:
        rp = d / f"{domain}.jsonl"
        with open(rp, "w", encoding="utf-8") as fh:
            for r in reviews:
                if r.domain == domain:
                    fh.write(json.dumps({"user_id": r.user_id, "parent_asin": r.item_id, "asin": r.item_id,
                                         "rating": r.rating, "title": r.title, "text": r.text,
                                         "timestamp": r.timestamp, "verified_purchase": True}) + "\n")
        mp = d / f"meta_{domain}.jsonl"
        with open(mp, "w", encoding="utf-8") as fh:
            for m in world.metadata():
                if m.domain == domain:
                    fh.write(json.dumps({"parent_asin": m.item_id, "title": m.title, "features": list(m.features),
                                         "description": list(m.description)}) + "\n")
        paths["reviews"].append(rp)
        paths["metadata"].append(mp)
    return paths
