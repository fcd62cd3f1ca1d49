"""A custom configuration."""

import ast
from pprint import pformat

from .exceptions import InvalidSettings

__all__ = ('Config',)


class Config(dict):
    """Custom mapping used to extend and override an app's settings."""

    def from_mapping(self, mapping):
        """Convert a mapping into settings.

        Uppercase keys of the specified mapping will be used to extend
        and update the existing settings.

        Args:
            mapping (dict): A mapping encapsulating settings.
        """
        for key, value in mapping.items():
            self[key] = value

    def from_object(self, obj):
        """Convert an object into settings.

        Uppercase attributes of the specified object will be used to
        extend and update the existing settings.

        Args:
            obj: An object encapsulating settings. This will typically
              be a module or class.
        """
        for key in dir(obj):
            if key.isupper():
                self[key] = getattr(obj, key)

    def from_pyfile(self, filename):
        """Read settings from a flat settings file.

        The file holds one ``KEY = value`` assignment per statement. Keys
        must be uppercase and values must be Python literals (numbers,
        strings, booleans, ``None``, tuples, lists, and dicts of those).
        The file is parsed, never executed.

        Args:
            filename (str): Path to the settings file.

        Raises:
            InvalidSettings: If any statement is not a literal assignment
                to an uppercase name. Every offending line is reported.
        """
        with open(filename) as f:
            source = f.read()

        try:
            tree = ast.parse(source, filename=filename)
        except SyntaxError as e:
            raise InvalidSettings(
                ['{}:{}: {}'.format(filename, e.lineno, e.msg)]) from e

        problems = []
        values = {}
        for node in tree.body:
            target = None
            if isinstance(node, ast.Assign) and len(node.targets) == 1:
                target = node.targets[0]
            if not isinstance(target, ast.Name) or not target.id.isupper():
                problems.append(
                    '{}:{}: expected an assignment to an uppercase '
                    'name'.format(filename, node.lineno))
                continue
            try:
                values[target.id] = ast.literal_eval(node.value)
            except ValueError:
                problems.append('{}:{}: {} is not a literal'.format(
                    filename, node.lineno, target.id))

        if problems:
            raise InvalidSettings(problems)

        self.from_mapping(values)

    def to_pyfile(self, filename):
        """Write the settings in the format read by :meth:`from_pyfile`.

        Only uppercase keys are written, in sorted order. Tuples are
        preserved so that a written file reloads to an equal mapping.
        Values that aren't literals (callbacks, exception classes) can
        only be set from code and are skipped.

        Args:
            filename (str): Path of the file to write.
        """
        lines = ['# Effective vidctl settings.']
        for key in sorted(k for k in self if k.isupper()):
            value = pformat(self[key], width=72)
            try:
                ast.literal_eval(value)
            except (ValueError, SyntaxError):
                continue
            lines.append('{} = {}'.format(key, value))
        with open(filename, 'w') as f:
            f.write('\n'.join(lines) + '\n')
