"""Experience replay with FIFO eviction.

Image states are split into 8-bit frames that are deduplicated by content:
a scanning agent sees the same handful of views again and again, so storing
each distinct frame once keeps a large buffer cheap. Vector states are
stored as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class FrameStore:
    """Reference-counted pool of distinct uint8 frames."""

    def __init__(self, frame_shape: tuple[int, int]):
        self.frame_shape = tuple(frame_shape)
        self.frames = np.zeros((0, *frame_shape), dtype=np.uint8)
        self.refs = np.zeros(0, dtype=np.int64)
        self.index: dict[bytes, int] = {}
        self.free: list[int] = []
        self.n_alloc = 0

    def __len__(self) -> int:
        return len(self.index)

    def add(self, frame: np.ndarray) -> int:
        key = frame.tobytes()
        fid = self.index.get(key)
        if fid is None:
            if self.free:
                fid = self.free.pop()
            else:
                fid = self.n_alloc
                self.n_alloc += 1
                if fid >= len(self.frames):
                    grow = max(64, len(self.frames))
                    self.frames = np.concatenate([self.frames, np.zeros((grow, *self.frame_shape), np.uint8)])
                    self.refs = np.concatenate([self.refs, np.zeros(grow, np.int64)])
            self.frames[fid] = frame
            self.index[key] = fid
        self.refs[fid] += 1
        return fid

    def release(self, fid: int) -> None:
        self.refs[fid] -= 1
        if self.refs[fid] == 0:
            del self.index[self.frames[fid].tobytes()]
            self.free.append(fid)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


class ReplayBuffer:
    def __init__(self, capacity: int, state_shape: tuple, action_shape: tuple = (), action_dtype=np.int64,
                 dedup_frames: bool | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.state_shape = tuple(state_shape)
        self.dedup = len(self.state_shape) == 3 if dedup_frames is None else dedup_frames
        if self.dedup:
            h, w, c = self.state_shape
            self.store = FrameStore((h, w))
            self.s = np.zeros((capacity, c), dtype=np.int64)
            self.s2 = np.zeros((capacity, c), dtype=np.int64)
        else:
            self.s = np.zeros((capacity, *state_shape), dtype=np.float64)
            self.s2 = np.zeros((capacity, *state_shape), dtype=np.float64)
        self.a = np.zeros((capacity, *action_shape), dtype=action_dtype)
        self.r = np.zeros(capacity, dtype=np.float64)
        self.d = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0

    def __len__(self) -> int:
        return self.size

    def _encode(self, state) -> np.ndarray:
        u8 = _to_u8(np.asarray(state))
        return np.array([self.store.add(u8[..., c]) for c in range(u8.shape[-1])], dtype=np.int64)

    def _decode(self, ids: np.ndarray) -> np.ndarray:
        frames = self.store.frames[ids]                     # (B, C, H, W)
        return np.moveaxis(frames, 1, -1).astype(np.float64) / 255.0

    def add(self, state, action, reward: float, next_state, done: bool) -> None:
        i = self.head
        if self.size == self.capacity and self.dedup:
            for fid in np.concatenate([self.s[i], self.s2[i]]):
                self.store.release(int(fid))
        if self.dedup:
            self.s[i] = self._encode(state)
            self.s2[i] = self._encode(next_state)
        else:
            self.s[i] = state
            self.s2[i] = next_state
        self.a[i] = action
        self.r[i] = reward
        self.d[i] = done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int, rng: np.random.Generator, dtype=np.float32) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(self.size, size=n)
        if self.dedup:
            s, s2 = self._decode(self.s[idx]), self._decode(self.s2[idx])
        else:
            s, s2 = self.s[idx], self.s2[idx]
        return Batch(s.astype(dtype), self.a[idx].copy(), self.r[idx].copy(), s2.astype(dtype), self.d[idx].copy())

    # -- persistence -----------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"replay_s": self.s, "replay_s2": self.s2, "replay_a": self.a, "replay_r": self.r,
               "replay_d": self.d, "replay_ptr": np.array([self.size, self.head], dtype=np.int64)}
        if self.dedup:
            out["replay_frames"] = self.store.frames
            out["replay_refs"] = self.store.refs
        return out

    def load_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.s[...] = arrs["replay_s"]
        self.s2[...] = arrs["replay_s2"]
        self.a[...] = arrs["replay_a"]
        self.r[...] = arrs["replay_r"]
        self.d[...] = arrs["replay_d"]
        self.size, self.head = (int(v) for v in arrs["replay_ptr"])
        if self.dedup:
            st = self.store
            st.frames = arrs["replay_frames"].copy()
            st.refs = arrs["replay_refs"].copy()
            st.index = {st.frames[i].tobytes(): i for i in np.flatnonzero(st.refs > 0)}
            st.n_alloc = len(st.frames)
            st.free = [int(i) for i in np.flatnonzero(st.refs == 0)[::-1]]
