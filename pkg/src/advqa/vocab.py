"""Token vocabulary with a shared unknown token."""

from __future__ import annotations

UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"


class Vocab:
    def __init__(self, tokens, specials=(UNK,)):
        seen = dict.fromkeys(specials)
        for t in sorted(set(tokens) - set(specials)):
            seen[t] = None
        self.tokens = list(seen)
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if UNK not in self._ids:
            raise ValueError("vocabulary must contain the unknown token")
        self.unk_id = self._ids[UNK]

    @classmethod
    def from_ordered(cls, tokens):
        """Rebuild a vocabulary preserving an explicit token order."""
        vocab = cls.__new__(cls)
        vocab.tokens = list(tokens)
        vocab._ids = {t: i for i, t in enumerate(vocab.tokens)}
        if UNK not in vocab._ids:
            raise ValueError("vocabulary must contain the unknown token")
        vocab.unk_id = vocab._ids[UNK]
        return vocab

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token) -> int:
        return self._ids.get(token, self.unk_id)

    def ids(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def token(self, idx: int) -> str:
        return self.tokens[idx]
