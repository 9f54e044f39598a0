"""AML-style XML serialization of scene models and the savings calculator.

The XML schema is a minimal CAEX-flavored hierarchy; units are encoded in
the attribute names (x_mm, roll_deg) so they cannot drift silently.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

from plantscan.errors import SchemaError, ValidationError
from plantscan.poses import ObjectPose

_POSE_ATTRS = ("x_mm", "y_mm", "z_mm", "roll_deg", "pitch_deg", "yaw_deg")


@dataclass(frozen=True)
class SceneModel:
    name: str
    poses: tuple = ()
    source: str = "estimated"          # "estimated" | "ground-truth"
    euler: str = "zyx-intrinsic"
    origin: str = "scene-zero"

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        seen = set()
        for p in self.poses:
            key = (p.class_name, p.instance_id)
            if key in seen:
                raise ValidationError(f"duplicate instance id {key}")
            seen.add(key)
        if self.source not in ("estimated", "ground-truth"):
            raise ValidationError(f"bad source {self.source!r}")


def write_aml(model: SceneModel, path) -> None:
    root = ET.Element("SceneModel", name=model.name, euler=model.euler,
                      origin=model.origin, source=model.source)
    hierarchy = ET.SubElement(root, "InstanceHierarchy")
    for pose in model.poses:
        elem = ET.SubElement(hierarchy, "InternalElement",
                             {"class": pose.class_name,
                              "id": str(pose.instance_id),
                              "source": model.source})
        ET.SubElement(elem, "Pose", {a: repr(float(getattr(pose, a)))
                                     for a in _POSE_ATTRS})
    ET.indent(root)
    tree = ET.ElementTree(root)
    with open(path, "wb") as fh:
        tree.write(fh, encoding="UTF-8", xml_declaration=True)
        fh.write(b"\n")


def parse_aml(path) -> SceneModel:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise SchemaError(f"{path}: not well-formed XML: {exc}") from exc
    if root.tag != "SceneModel":
        raise SchemaError(f"root element is <{root.tag}>, expected <SceneModel>")
    for attr in ("name", "euler", "origin", "source"):
        if attr not in root.attrib:
            raise SchemaError(f"<SceneModel> missing attribute {attr!r}")
    hierarchy = root.find("InstanceHierarchy")
    if hierarchy is None:
        raise SchemaError("missing <InstanceHierarchy>")
    poses = []
    source = root.attrib["source"]
    for elem in hierarchy.findall("InternalElement"):
        for attr in ("class", "id", "source"):
            if attr not in elem.attrib:
                raise SchemaError(f"<InternalElement> missing attribute {attr!r}")
        pose_elem = elem.find("Pose")
        if pose_elem is None:
            raise SchemaError(f"<InternalElement class={elem.attrib['class']!r}> "
                              "missing <Pose>")
        vals = {}
        for attr in _POSE_ATTRS:
            if attr not in pose_elem.attrib:
                raise SchemaError(f"<Pose> missing attribute {attr!r}")
            vals[attr] = float(pose_elem.attrib[attr])
        poses.append(ObjectPose(elem.attrib["class"], int(elem.attrib["id"]), **vals))
    try:
        return SceneModel(root.attrib["name"], tuple(poses), source=source,
                          euler=root.attrib["euler"], origin=root.attrib["origin"])
    except ValidationError as exc:
        raise SchemaError(str(exc)) from exc


@dataclass(frozen=True)
class SavingsInput:
    cost_per_m2: float          # euro per square meter
    area_per_plant: float       # square meters
    scanned_fraction: float     # [0, 1]
    n_plants: int
    scans_per_year: float
    automation_degree: float    # [0, 1]

    def __post_init__(self):
        vals = (self.cost_per_m2, self.area_per_plant, self.scanned_fraction,
                self.n_plants, self.scans_per_year, self.automation_degree)
        if any(v < 0 for v in vals):
            raise ValidationError("all savings inputs must be non-negative")
        if self.scanned_fraction > 1 or self.automation_degree > 1:
            raise ValidationError("fractions must be <= 1")


def compute_savings(inp: SavingsInput) -> dict[str, float]:
    """Yearly scanning cost of the fleet and the share saved by automation."""
    total = (inp.cost_per_m2 * inp.area_per_plant * inp.scanned_fraction
             * inp.n_plants * inp.scans_per_year)
    return {"total_cost_per_year": total,
            "savings_per_year": total * inp.automation_degree}
