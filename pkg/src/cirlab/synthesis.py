"""Stage 2 of the synthesis pipeline: captions and LLM edit instructions for image pairs."""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from cirlab.errors import EmptyCaption, ProviderError
from cirlab.mining import ImagePair
from cirlab.providers import Gateway

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Source sentence: {reference_caption}\n"
    "Target sentence: {target_caption}\n"
    "If source sentence describes a source picture and target sentence describes a target "
    "picture, the source picture and an instruction are used to find the target picture. "
    "The instruction should indicate the difference between source and target. "
    "It should be as short as possible. Show the instruction."
)


class TripletStatus(str, enum.Enum):
    UNFILTERED = "unfiltered"
    KEPT = "kept"
    DROPPED_SAME_CAPTION = "dropped_same_caption"
    DROPPED_LOW_SIMILARITY = "dropped_low_similarity"


@dataclass(frozen=True)
class SyntheticTriplet:
    reference_id: str
    target_id: str
    reference_caption: str
    target_caption: str
    query_text: str
    filter_score: float | None = None
    status: TripletStatus = TripletStatus.UNFILTERED

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise ValueError("reference and target must differ")
        object.__setattr__(self, "status", TripletStatus(self.status))

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["status"] = self.status.value
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "SyntheticTriplet":
        return cls(
            reference_id=str(rec["reference_id"]), target_id=str(rec["target_id"]),
            reference_caption=rec["reference_caption"], target_caption=rec["target_caption"],
            query_text=rec["query_text"], filter_score=rec.get("filter_score"),
            status=rec.get("status", "unfiltered"))


def build_prompt(reference_caption: str, target_caption: str) -> str:
    if not reference_caption or not target_caption:
        raise EmptyCaption("both captions must be non-empty")
    # plain concatenation: braces inside captions must not be re-expanded
    head, rest = PROMPT_TEMPLATE.split("{reference_caption}")
    mid, tail = rest.split("{target_caption}")
    return head + reference_caption + mid + target_caption + tail


def caption_images(image_ids: Iterable[str], gateway: Gateway) -> tuple[dict[str, str], dict]:
    """Caption each distinct id. Returns ``(captions, errors)`` where errors maps id -> message."""
    ids = sorted(set(image_ids))
    results = gateway.map(gateway.caption_image, ids)
    captions, errors = {}, {}
    for image_id, res in zip(ids, results):
        if isinstance(res, ProviderError):
            errors[image_id] = f"{type(res).__name__}: {res}"
            log.warning("caption failed for %s: %s", image_id, res)
        else:
            captions[image_id] = res
    return captions, errors


def synthesize_triplet(pair: ImagePair, gateway: Gateway,
                       captions: Mapping[str, str] | None = None) -> SyntheticTriplet:
    ref_cap = captions[pair.reference_id] if captions else gateway.caption_image(pair.reference_id)
    tgt_cap = captions[pair.target_id] if captions else gateway.caption_image(pair.target_id)
    instruction = gateway.generate_instruction(build_prompt(ref_cap, tgt_cap))
    return SyntheticTriplet(pair.reference_id, pair.target_id, ref_cap, tgt_cap, instruction)


def synthesize_triplets(pairs: Sequence[ImagePair], gateway: Gateway,
                        captions: Mapping[str, str] | None = None):
    """Generate triplets for a batch of pairs.

    Pairs whose provider calls fail (or whose captions are missing) are left out;
    returns ``(triplets, errors)`` with errors as ``{"reference_id", "target_id", "error"}``.
    """
    def one(pair):
        if captions is not None:
            missing = [i for i in (pair.reference_id, pair.target_id) if i not in captions]
            if missing:
                raise ProviderError(f"no caption for {', '.join(missing)}")
        return synthesize_triplet(pair, gateway, captions)

    triplets, errors = [], []
    for pair, res in zip(pairs, gateway.map(one, list(pairs))):
        if isinstance(res, ProviderError):
            errors.append({"reference_id": pair.reference_id, "target_id": pair.target_id,
                           "error": f"{type(res).__name__}: {res}"})
        else:
            triplets.append(res)
    return triplets, errors
