"""Named parameter store. Leaves live in insertion order under dotted
names ("backbone.block03.wq"); stage freeze plans flip trainable flags by
prefix, and group checksums certify what a training run left untouched.
"""

import hashlib

import numpy as np

from . import autodiff as ad


class ParamBag:
    def __init__(self):
        self._leaves = {}

    def add(self, name, value, trainable=True):
        if name in self._leaves:
            raise ValueError("duplicate parameter %r" % name)
        lf = ad.leaf(value, requires_grad=trainable)
        self._leaves[name] = lf
        return lf

    def __getitem__(self, name):
        return self._leaves[name]

    def __contains__(self, name):
        return name in self._leaves

    def __len__(self):
        return len(self._leaves)

    def names(self, prefix=""):
        return [n for n in self._leaves if n.startswith(prefix)]

    def leaves(self, prefix="", trainable=None):
        out = []
        for n, lf in self._leaves.items():
            if n.startswith(prefix) and (trainable is None
                                         or lf.requires_grad == trainable):
                out.append((n, lf))
        return out

    def n_params(self, prefix=""):
        return sum(lf.value.size for _, lf in self.leaves(prefix))

    def set_trainable(self, prefixes, flag):
        """Flip the trainable bit under the given prefixes; returns how many
        leaves changed so callers can assert the plan touched something."""
        if isinstance(prefixes, str):
            prefixes = (prefixes,)
        hit = 0
        for n, lf in self._leaves.items():
            if any(n.startswith(p) for p in prefixes):
                lf.requires_grad = bool(flag)
                hit += 1
        return hit

    def freeze_all(self):
        self.set_trainable("", False)

    def zero_grads(self):
        for lf in self._leaves.values():
            lf.grad = None

    def checksum(self, prefix=""):
        """Order-independent content hash of every leaf under prefix."""
        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            v = np.ascontiguousarray(self._leaves[n].value)
            h.update(n.encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def state(self):
        return {n: lf.value.copy() for n, lf in self._leaves.items()}

    def load_state(self, arrays):
        missing = set(self._leaves) - set(arrays)
        extra = set(arrays) - set(self._leaves)
        if missing or extra:
            raise ValueError("state mismatch: missing %s, unexpected %s"
                             % (sorted(missing), sorted(extra)))
        for n, lf in self._leaves.items():
            a = ad.as_tensor(arrays[n])
            if a.shape != lf.value.shape:
                raise ValueError("parameter %s: stored %s, want %s"
                                 % (n, a.shape, lf.value.shape))
            lf.value = a

    def randomize(self, prefix, rng, scale=0.05):
        """Overwrite a group with small noise; lets gradient checks probe
        heads that are deliberately zero at build time."""
        for _, lf in self.leaves(prefix):
            lf.value = ad.as_tensor(rng.standard_normal(lf.value.shape) * scale)
