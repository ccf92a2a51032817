"""
Case and scenario files are JSON or YAML, chosen by file extension.

References to files may be plain paths (relative to the referencing file)
or "python.module:relative/path" references resolved against the
directory of an importable package, so that bundled fixtures can be
named without knowing where the package is installed.
"""
import importlib
import json
import os
import yaml

from typing import Union, Dict, Any, TextIO, Optional

from codispatch.errors import CaseSyntaxError


def load(f: TextIO) -> Dict[str, Any]:
    return loads(f.read(), getattr(f, 'name', ''))


def loads(s: Union[str, bytes, bytearray], url: str = '') -> Dict[str, Any]:
    if is_yaml(url):
        try:
            # type_ignore_reason: incomplete typing
            data = yaml.safe_load(s)  # type: ignore
        except yaml.MarkedYAMLError as e:
            mark = e.problem_mark
            raise CaseSyntaxError(
                'invalid YAML in %s: %s' % (url, e.problem),
                mark.line + 1 if mark else None,
                mark.column + 1 if mark else None)
    else:
        try:
            data = json.loads(s)
        except json.JSONDecodeError as e:
            raise CaseSyntaxError(
                'invalid JSON in %s: %s' % (url or '<string>', e.msg),
                e.lineno, e.colno)
    if not isinstance(data, dict):
        raise CaseSyntaxError(
            'expected an object at the top level of %s' % (url or '<string>'))
    return data


def is_yaml(n: str) -> bool:
    return n.endswith(('.yaml', '.yml'))


def resolve_path(ref: str, relative_to: Optional[str] = None) -> str:
    """
    Find the file a reference points at.

    :param ref: "some.module:path/in/module" or a filesystem path
    :param relative_to: directory plain relative paths are resolved from

    :return: absolute path, which may not exist
    """
    if ':' in ref and not os.path.isabs(ref) and not _is_drive(ref):
        module, file_name = ref.split(':', 1)
        try:
            m = importlib.import_module(module)
        except ImportError:
            return os.path.abspath(ref)
        return os.path.join(os.path.dirname(m.__file__ or ''), file_name)
    if relative_to and not os.path.isabs(ref):
        return os.path.abspath(os.path.join(relative_to, ref))
    return os.path.abspath(ref)


def load_path(path: str) -> Dict[str, Any]:
    with open(path, encoding='utf-8') as f:
        return load(f)


def _is_drive(ref: str) -> bool:
    return len(ref) > 1 and ref[1] == ':' and ref[0].isalpha()
