"""Dataset manifest schema.

A manifest lists every image (with optional label), the split of ids into
labeled / unlabeled / validation / test sets, the class count, and the seed
used to produce the split. It is stored as JSON next to ``images/`` and
``labels/``; paths are relative to the manifest's directory.

Invariants enforced on load:
  - entry ids are unique;
  - split id sets are pairwise disjoint and reference known entries;
  - every labeled id has a label_path.
"""

from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from crossprompt_seg.core.errors import ManifestError

MANIFEST_SCHEMA_VERSION: int = 1

SPLIT_NAMES: tuple[str, ...] = ("labeled", "unlabeled", "val", "test")


class ManifestEntry(BaseModel):
    """One image file with its optional label map.

    Attributes:
        id: Unique sample identifier.
        image_path: Image file path relative to the manifest directory.
        label_path: Label PNG path, or None for unlabeled images.
        group: Grouping key kept together by splitting (e.g. patient).
        category: Stratification key (e.g. benign / malignant).
        spacing: Physical pixel size (row, col).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str = Field(..., min_length=1)
    image_path: str
    label_path: str | None = None
    group: str | None = None
    category: str | None = None
    spacing: tuple[float, float] | None = None

    @property
    def group_key(self) -> str:
        return self.group if self.group is not None else self.id


class DatasetSplit(BaseModel):
    """Partition of entry ids."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    labeled_ids: list[str] = Field(default_factory=list)
    unlabeled_ids: list[str] = Field(default_factory=list)
    val_ids: list[str] = Field(default_factory=list)
    test_ids: list[str] = Field(default_factory=list)

    def ids_for(self, split_name: str) -> list[str]:
        """Ids of a named split (labeled, unlabeled, val, test)."""
        if split_name not in SPLIT_NAMES:
            raise ManifestError(f"unknown split {split_name!r}; expected one of {', '.join(SPLIT_NAMES)}")
        return list(getattr(self, f"{split_name}_ids"))

    @property
    def training_ids(self) -> list[str]:
        return [*self.labeled_ids, *self.unlabeled_ids]


class DatasetManifest(BaseModel):
    """Validated dataset description."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = MANIFEST_SCHEMA_VERSION
    num_classes: int = Field(..., ge=2)
    seed: int | None = None
    entries: list[ManifestEntry]
    split: DatasetSplit = DatasetSplit()

    @model_validator(mode="after")
    def _check_invariants(self) -> "DatasetManifest":
        if self.schema_version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(
                f"unsupported schema_version {self.schema_version}; expected {MANIFEST_SCHEMA_VERSION}",
                offending_entries=["schema_version"],
            )

        ids = [entry.id for entry in self.entries]
        duplicates = sorted({entry_id for entry_id in ids if ids.count(entry_id) > 1})
        if duplicates:
            raise ManifestError(f"duplicate entry ids: {duplicates}", offending_entries=duplicates)

        known = set(ids)
        seen: dict[str, str] = {}
        overlapping: list[str] = []
        unknown: list[str] = []
        for name in SPLIT_NAMES:
            for entry_id in self.split.ids_for(name):
                if entry_id not in known:
                    unknown.append(entry_id)
                if entry_id in seen and entry_id not in overlapping:
                    overlapping.append(entry_id)
                seen.setdefault(entry_id, name)
        if unknown:
            raise ManifestError(f"split references unknown ids: {sorted(set(unknown))}", sorted(set(unknown)))
        if overlapping:
            raise ManifestError(f"ids appear in more than one split: {overlapping}", offending_entries=overlapping)

        by_id = self.entry_map()
        unlabeled = [entry_id for entry_id in self.split.labeled_ids if by_id[entry_id].label_path is None]
        if unlabeled:
            raise ManifestError(f"ids require a label_path: {unlabeled}", offending_entries=unlabeled)
        return self

    def entry_map(self) -> dict[str, ManifestEntry]:
        return {entry.id: entry for entry in self.entries}

    def entries_for(self, split_name: str) -> list[ManifestEntry]:
        """Entries of a named split in split order."""
        by_id = self.entry_map()
        return [by_id[entry_id] for entry_id in self.split.ids_for(split_name)]

    def counts(self) -> dict[str, int]:
        return {name: len(self.split.ids_for(name)) for name in SPLIT_NAMES}

    def to_dict(self) -> dict[str, Any]:
        return self.model_dump(mode="json")


def parse_manifest(data: dict[str, Any]) -> DatasetManifest:
    """Validate raw manifest data.

    Raises:
        ManifestError: On schema violations, listing the offending entries.
    """
    try:
        return DatasetManifest.model_validate(data)
    except ManifestError:
        raise
    except ValidationError as exc:
        offending = sorted({".".join(str(part) for part in error["loc"]) for error in exc.errors()})
        raise ManifestError(f"manifest failed schema validation at {offending}", offending_entries=offending) from exc
