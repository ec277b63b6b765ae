"""Procedural story corpus with engineered long-range structure.

Each story has L frames on a fixed background with one character walking
on a grid. Captions follow the grammar BACKGROUND? CHARACTER ACTION
POSITION: the first caption always names the background, later captions
omit it with probability p_omit. Whenever the sampled omissions leave no
frame t >= 3 whose caption and predecessor caption both omit the
background, frames 2 and 3 are forced to omit it, so every story
contains information recoverable only from captions at least two frames
back.

Generation is integer-only; pixels are uint8 and map to floats via
(v - 128) / 128, so corpora are byte-identical across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataConfig
from .errors import ConfigError, ContractError, DataError

PAD_TOKEN = "<pad>"
PAD_ID = 0

# palette entries are uint8 RGB; background channels sit at +-0.75 in
# float units so distinct backgrounds differ by 1.5 per mismatched channel
BACKGROUND_COLORS = np.array(
    [[32, 32, 32], [32, 32, 224], [32, 224, 32], [224, 32, 32]], dtype=np.uint8
)
CHARACTER_COLORS = np.array(
    [[255, 96, 96], [96, 255, 96], [96, 96, 255], [255, 255, 96]], dtype=np.uint8
)

# 4x4 glyph bitmaps, one per character id
GLYPHS = np.array(
    [
        [[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
        [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],
        [[1, 1, 1, 1], [0, 1, 1, 0], [0, 1, 1, 0], [0, 1, 1, 0]],
        [[1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0], [1, 1, 1, 1]],
    ],
    dtype=bool,
)

ACTION_NAMES = ("stay", "right", "down", "left")
ACTION_MOVES = ((0, 0), (0, 1), (1, 0), (0, -1))

FORMAT_VERSION = 1


def build_vocab(cfg: DataConfig) -> list[str]:
    """Token table: pad, backgrounds, characters, actions, grid positions."""
    vocab = [PAD_TOKEN]
    vocab += [f"bg{i}" for i in range(cfg.n_backgrounds)]
    vocab += [f"char{i}" for i in range(cfg.n_characters)]
    vocab += [f"act_{ACTION_NAMES[i]}" for i in range(cfg.n_actions)]
    vocab += [f"pos_{r}_{c}" for r in range(cfg.grid) for c in range(cfg.grid)]
    return vocab


def _token_ids(cfg: DataConfig):
    bg0 = 1
    char0 = bg0 + cfg.n_backgrounds
    act0 = char0 + cfg.n_characters
    pos0 = act0 + cfg.n_actions
    return bg0, char0, act0, pos0


@dataclass(frozen=True)
class CharacterTrack:
    char_id: int
    cells: tuple       # (row, col) per frame
    actions: tuple     # action id per frame


@dataclass(frozen=True)
class SceneMeta:
    background: int
    characters: tuple  # CharacterTrack per character


@dataclass(frozen=True)
class StoryRecord:
    story_id: int
    captions: np.ndarray   # [L, caption_len] int64, padded with PAD_ID
    frames_u8: np.ndarray  # [L, C, H, W] uint8
    scene: SceneMeta

    def frames_float(self) -> np.ndarray:
        return frames_to_float(self.frames_u8)


def frames_to_float(frames_u8: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float64 in [-1, 1) with exact dyadic scaling."""
    return (frames_u8.astype(np.float64) - 128.0) / 128.0


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    """Inverse of frames_to_float with clipping; rint ties-to-even."""
    return np.clip(np.rint(np.asarray(frame) * 128.0 + 128.0), 0, 255).astype(np.uint8)


def render_frame(cfg: DataConfig, background: int, characters) -> np.ndarray:
    """Rasterise one frame as uint8 [C,H,W].

    characters is an iterable of (char_id, row, col). Overlaps resolve by
    draw order: lower ids are drawn last and therefore sit on top.
    """
    size, cell = cfg.image_size, cfg.cell
    frame = np.empty((3, size, size), dtype=np.uint8)
    frame[:] = BACKGROUND_COLORS[background][:, None, None]
    for char_id, row, col in sorted(characters, key=lambda c: -c[0]):
        if not (0 <= row < cfg.grid and 0 <= col < cfg.grid):
            raise ContractError(f"character at ({row},{col}) outside {cfg.grid}x{cfg.grid} grid")
        y0, x0 = row * cell, col * cell
        glyph = GLYPHS[char_id][:cell, :cell]
        patch = frame[:, y0 : y0 + cell, x0 : x0 + cell]
        patch[:, glyph] = CHARACTER_COLORS[char_id][:, None]
    return frame


def _caption_tokens(cfg, bg, char_id, action, row, col, include_bg):
    bg0, char0, act0, pos0 = _token_ids(cfg)
    toks = []
    if include_bg:
        toks.append(bg0 + bg)
    toks += [char0 + char_id, act0 + action, pos0 + row * cfg.grid + col]
    return toks


def generate_story(seed: int, cfg: DataConfig, story_id: int = 0) -> StoryRecord:
    """Deterministic story for a 64-bit seed."""
    rng = np.random.default_rng(seed)
    length = cfg.length
    background = int(rng.integers(cfg.n_backgrounds))
    char_id = int(rng.integers(cfg.n_characters))
    row = int(rng.integers(cfg.grid))
    col = int(rng.integers(cfg.grid))

    cells, actions = [], []
    for _ in range(length):
        action = int(rng.integers(cfg.n_actions))
        dr, dc = ACTION_MOVES[action]
        row = min(max(row + dr, 0), cfg.grid - 1)
        col = min(max(col + dc, 0), cfg.grid - 1)
        cells.append((row, col))
        actions.append(action)

    # frame 1 always states the background; later frames omit it with
    # probability p_omit
    omitted = [False] + [bool(rng.random() < cfg.p_omit) for _ in range(length - 1)]
    if length >= 3 and not any(omitted[i] and omitted[i - 1] for i in range(2, length)):
        omitted[1] = omitted[2] = True

    captions = np.full((length, cfg.caption_len), PAD_ID, dtype=np.int64)
    for i in range(length):
        toks = _caption_tokens(
            cfg, background, char_id, actions[i], cells[i][0], cells[i][1],
            include_bg=not omitted[i],
        )
        captions[i, : len(toks)] = toks

    frames = np.stack(
        [render_frame(cfg, background, [(char_id, r, c)]) for r, c in cells]
    )
    scene = SceneMeta(
        background=background,
        characters=(CharacterTrack(char_id, tuple(cells), tuple(actions)),),
    )
    return StoryRecord(story_id, captions, frames, scene)


# ---------------------------------------------------------------------------
# dataset file I/O: one JSON header line, then one JSON record per line


def write_dataset(records, path, cfg: DataConfig) -> None:
    records = list(records)
    if not records:
        raise ContractError("write_dataset: no records")
    header = {
        "format_version": FORMAT_VERSION,
        "vocab": build_vocab(cfg),
        "image_shape": list(cfg.image_shape),
        "length": cfg.length,
        "grid": cfg.grid,
        "caption_len": cfg.caption_len,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            row = {
                "story_id": rec.story_id,
                "captions": rec.captions.tolist(),
                "frames": rec.frames_u8.reshape(-1).tolist(),
                "background": rec.scene.background,
                "characters": [
                    {
                        "char_id": tr.char_id,
                        "cells": [list(c) for c in tr.cells],
                        "actions": list(tr.actions),
                    }
                    for tr in rec.scene.characters
                ],
            }
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def read_dataset(path):
    """Parse a dataset file; returns (header dict, list of StoryRecord).

    Errors name the failing line (1-based).
    """
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise DataError(f"{path}: line 1: missing header")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line 1: malformed header ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"{path}: line 1: format version {header.get('format_version')!r}, "
                f"expected {FORMAT_VERSION}"
            )
        vocab_size = len(header["vocab"])
        shape = tuple(header["image_shape"])
        length = header["length"]
        cap_len = header["caption_len"]
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                captions = np.asarray(row["captions"], dtype=np.int64)
                frames = np.asarray(row["frames"], dtype=np.int64)
                chars = tuple(
                    CharacterTrack(
                        c["char_id"],
                        tuple(tuple(cell) for cell in c["cells"]),
                        tuple(c["actions"]),
                    )
                    for c in row["characters"]
                )
                scene = SceneMeta(row["background"], chars)
                story_id = row["story_id"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: malformed record ({exc})") from exc
            if captions.shape != (length, cap_len):
                raise DataError(
                    f"{path}: line {lineno}: captions shape {captions.shape}, "
                    f"expected {(length, cap_len)}"
                )
            if captions.min() < 0 or captions.max() >= vocab_size:
                raise DataError(
                    f"{path}: line {lineno}: caption token outside vocabulary "
                    f"of {vocab_size}"
                )
            if frames.size != length * int(np.prod(shape)):
                raise DataError(
                    f"{path}: line {lineno}: frame payload of {frames.size} values, "
                    f"expected {length * int(np.prod(shape))}"
                )
            if frames.min() < 0 or frames.max() > 255:
                raise DataError(f"{path}: line {lineno}: pixel outside [0, 255]")
            records.append(
                StoryRecord(
                    story_id,
                    captions,
                    frames.reshape((length,) + shape).astype(np.uint8),
                    scene,
                )
            )
    if not records:
        raise DataError(f"{path}: no records after the header")
    return header, records


def write_ppm(path, frame_u8: np.ndarray) -> None:
    """Binary P6 portable pixmap from a [3,H,W] uint8 frame."""
    _, height, width = frame_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(frame_u8.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) != 4:
        raise DataError(f"{path}: not a binary P6 pixmap")
    width, height = (int(x) for x in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height * 3)
    return pixels.reshape(height, width, 3).transpose(2, 0, 1).copy()
