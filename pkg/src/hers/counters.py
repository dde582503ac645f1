from dataclasses import dataclass, fields


@dataclass
class OpCounters:
    """Homomorphic operation tallies for one request.

    ``add`` counts accumulation adds; the adds that fold a product into a
    freshly encrypted zero score are kept apart in ``init_add``.
    """

    mult: int = 0
    add: int = 0
    init_add: int = 0
    rot: int = 0
    resident_bytes: int = 0

    def reset(self):
        for f in fields(self):
            setattr(self, f.name, 0)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
