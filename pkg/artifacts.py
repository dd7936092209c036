import json

import numpy as np

from mrCore.envsim import WorldSpec


def to_dict(obj):
    """
    Makes the following types into serializable form:

    * WorldSpec
    * numpy arrays and scalars

    Used as ``default=`` of ``json.dump``.

    :param obj: Object json cannot serialize by itself.
    :return: Serializable form of ``obj``.
    """
    if isinstance(obj, WorldSpec):
        return {
            "__class__": "WorldSpec",
            "__inst__": obj.to_dict()
        }
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError("Object of type %s is not JSON serializable" % type(obj).__name__)


def dict2obj(d):
    """
    Default deserializer.

    :param d:  Serializable dictionary representation of an object
        to be reconstructed.
    :return: Reconstructed object.
    """
    if '__class__' in d and '__inst__' in d:
        if d['__class__'] == "WorldSpec":
            return WorldSpec.from_dict(d['__inst__'])
        return d
    else:
        return d


def write_json(path, obj):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(obj, f, default=to_dict, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f, object_hook=dict2obj)
