"""Line-delimited JSON metrics."""

import json
import os

__all__ = ('MetricsWriter', 'read_metrics')


class MetricsWriter:
    """Appends one JSON object per line to a file.

    Register :meth:`postprocess` as a result postprocessor to record
    every result an application's callback returns.

    Args:
        path (str): The file to write. Parent directories are created.
    """

    def __init__(self, path):
        """Initialize the writer."""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.path = path

    def write(self, record):
        """Append a record."""
        with open(self.path, 'a') as f:
            f.write(json.dumps(record, sort_keys=True) + '\n')

    async def postprocess(self, app, result):
        """Write a result and pass it on unchanged."""
        self.write(result)
        return result


def read_metrics(path):
    """Return every record in a metrics file."""
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
