"""Exception hierarchy shared by every module.

Each error names a concrete failure; callers that only care about "bad input"
can catch :class:`MorphGraspError`.
"""


class MorphGraspError(Exception):
    pass


# urdf_morph
class MalformedXml(MorphGraspError, ValueError):
    pass


class UnknownLinkReference(MorphGraspError, ValueError):
    pass


class CycleDetected(MorphGraspError, ValueError):
    pass


class UnsupportedJointKind(MorphGraspError, ValueError):
    pass


class MissingJointAngle(MorphGraspError, KeyError):
    pass


class TooManyLinks(MorphGraspError, ValueError):
    pass


# mesh_geometry
class UnsupportedFormat(MorphGraspError, ValueError):
    pass


class CorruptFile(MorphGraspError, ValueError):
    pass


class EmptyMesh(MorphGraspError, ValueError):
    pass


class TooFewPoints(MorphGraspError, ValueError):
    pass


class NoMeshes(MorphGraspError, ValueError):
    pass


# tensor_nn
class ShapeMismatch(MorphGraspError, ValueError):
    pass


class HeadDivisibility(MorphGraspError, ValueError):
    pass


class IndexOutOfRange(MorphGraspError, IndexError):
    pass


class GraphNotRecorded(MorphGraspError, RuntimeError):
    pass


# model
class InvalidKeypointIndex(MorphGraspError, IndexError):
    pass


class UnknownLink(MorphGraspError, KeyError):
    pass


class MissingGroundTruth(MorphGraspError, ValueError):
    pass


class VariantInputMismatch(MorphGraspError, ValueError):
    pass


# grasp pipeline
class EmptyCloud(MorphGraspError, ValueError):
    pass


class CacheMiss(MorphGraspError, FileNotFoundError):
    pass


class EmptyDataset(MorphGraspError, ValueError):
    pass


class ConfigMismatch(MorphGraspError, ValueError):
    pass


class DivergedNaN(MorphGraspError, FloatingPointError):
    pass


class TooFewGrasps(MorphGraspError, ValueError):
    pass
