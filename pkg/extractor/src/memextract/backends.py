"""Encoder backends.

A backend turns batches of preprocessed 224x224 RGB images and caption
strings into fixed-width embedding matrices: 1408 columns for images,
768 for text.  Two implementations exist:

* :class:`StubBackend` — deterministic, dependency-free vectors derived
  from content digests.  It exercises the full pipeline (decode, resize,
  batching, skip handling, output formats) without model weights and is
  what the test suite runs against.
* :class:`Blip2Backend` — the real frozen encoders, loaded lazily from
  ``transformers``.  The image vector is the vision tower's pooled
  output; the text vector is the first token of the Q-Former text
  encoder's projected output.  Both poolings are stated assumptions:
  the pretrained releases do not pin which token or pooling yields
  these widths, so the choices here are explicit and swappable.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import BackendError

IMG_WIDTH = 1408
TXT_WIDTH = 768


def _digest_vector(payload: bytes, width: int) -> np.ndarray:
    """Unit-variance Gaussian vector seeded by a content digest."""
    digest = hashlib.sha256(payload).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.normal(size=width).astype(np.float32)


class StubBackend:
    """Deterministic stand-in encoders keyed by content digests.

    The image vector depends only on the decoded, resized pixel bytes,
    and the text vector only on the UTF-8 caption, so repeat runs agree
    exactly on any platform.
    """

    name = "stub"

    def encode_images(self, images: list[np.ndarray]) -> np.ndarray:
        out = np.empty((len(images), IMG_WIDTH), dtype=np.float32)
        for i, image in enumerate(images):
            out[i] = _digest_vector(b"image:" + image.tobytes(), IMG_WIDTH)
        return out

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), TXT_WIDTH), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = _digest_vector(b"text:" + text.encode("utf-8"), TXT_WIDTH)
        return out


class Blip2Backend:
    """Frozen BLIP-2 encoders via ``transformers`` (optional heavy path).

    Pooling assumptions, stated explicitly:

    * image: ``Blip2VisionModel(...).pooler_output`` — the vision
      tower's pooled class representation, width 1408;
    * text: ``Blip2TextModelWithProjection`` first-token output, the
      Q-Former text encoder's [Encode]-style token, width 768.

    The text path requires a checkpoint that ships Q-Former text
    weights (the retrieval checkpoints do; bare captioning checkpoints
    may not), which is surfaced as a :class:`BackendError` rather than
    silently extracting from untrained weights.
    """

    name = "blip2"

    def __init__(self, model_name: str = "Salesforce/blip2-opt-2.7b", device: str = "cpu"):
        try:
            import torch
            from transformers import (
                AutoProcessor,
                Blip2TextModelWithProjection,
                Blip2VisionModel,
            )
        except ImportError as exc:
            raise BackendError(
                "the blip2 backend needs the optional dependencies: "
                "pip install 'memextract[blip2]'"
            ) from exc
        self._torch = torch
        self._device = device
        try:
            self._processor = AutoProcessor.from_pretrained(model_name)
            self._vision = Blip2VisionModel.from_pretrained(model_name).to(device).eval()
            self._text = (
                Blip2TextModelWithProjection.from_pretrained(model_name).to(device).eval()
            )
        except Exception as exc:
            raise BackendError(f"could not load encoders from {model_name!r}: {exc}") from exc
        for module in (self._vision, self._text):
            for parameter in module.parameters():
                parameter.requires_grad_(False)

    def encode_images(self, images: list[np.ndarray]) -> np.ndarray:
        torch = self._torch
        inputs = self._processor(images=images, return_tensors="pt").to(self._device)
        with torch.no_grad():
            pooled = self._vision(**inputs).pooler_output
        return pooled.cpu().numpy().astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        inputs = self._processor(
            text=texts, return_tensors="pt", padding=True, truncation=True
        ).to(self._device)
        with torch.no_grad():
            out = self._text(input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"])
        first_token = out.text_embeds[:, 0, :]
        return first_token.cpu().numpy().astype(np.float32)


BACKENDS = {
    "stub": StubBackend,
    "blip2": Blip2Backend,
}


def make_backend(name: str, **kwargs):
    try:
        factory = BACKENDS[name]
    except KeyError:
        raise BackendError(
            f"unknown backend {name!r}; choose from {', '.join(sorted(BACKENDS))}"
        ) from None
    return factory(**kwargs)
