"""
Clients for the external services used while building the benchmark.

Each service speaks JSON over HTTP POST. Images travel base64-encoded.
"""
import base64
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol

import requests

from src.constants import IDB_API_KEY, IDB_CLIENT_TIMEOUT, IDB_DET_URL, IDB_LLM_URL, IDB_T2I_URL, IDB_VLM_URL

logger = logging.getLogger('MultiID')


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class TextToImageClient(Protocol):
    def generate(self, prompt: str, seed: int, out_path: Path) -> Path: ...


class VLMClient(Protocol):
    def ask(self, prompt: str, image_path: Optional[Path] = None) -> str: ...


class DetectorClient(Protocol):
    def detect(self, image_path: Path, concept: str) -> List[Dict[str, Any]]: ...


def _encode_image(path: Path) -> str:
    return base64.b64encode(Path(path).read_bytes()).decode('ascii')


class HttpServiceClient:
    """
    JSON POST to one endpoint.

    Attributes:
        url: Endpoint URL
        api_key: Bearer token, empty for none
        timeout: Request timeout in seconds
    """

    def __init__(self, url: str, api_key: str = IDB_API_KEY, timeout: int = IDB_CLIENT_TIMEOUT):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def _post(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        headers = {'Content-Type': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f"Bearer {self.api_key}"
        logger.debug("POST %s", self.url)
        response = requests.post(self.url, data=json.dumps(payload), headers=headers, timeout=self.timeout)
        response.raise_for_status()
        return json.loads(response.content)


class HttpLLMClient(HttpServiceClient):
    def __init__(self, url: str = IDB_LLM_URL, **kwargs):
        super().__init__(url, **kwargs)

    def complete(self, prompt: str) -> str:
        return self._post({'prompt': prompt})['text']


class HttpTextToImageClient(HttpServiceClient):
    def __init__(self, url: str = IDB_T2I_URL, **kwargs):
        super().__init__(url, **kwargs)

    def generate(self, prompt: str, seed: int, out_path: Path) -> Path:
        content = self._post({'prompt': prompt, 'seed': seed})
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_bytes(base64.b64decode(content['image']))
        return out_path


class HttpVLMClient(HttpServiceClient):
    def __init__(self, url: str = IDB_VLM_URL, **kwargs):
        super().__init__(url, **kwargs)

    def ask(self, prompt: str, image_path: Optional[Path] = None) -> str:
        payload = {'prompt': prompt}
        if image_path is not None:
            payload['image'] = _encode_image(image_path)
        return self._post(payload)['text']


class HttpDetectorClient(HttpServiceClient):
    """Detections come back as ``{"box": [x0, y0, x1, y1], "score": s}`` in normalized coordinates."""

    def __init__(self, url: str = IDB_DET_URL, **kwargs):
        super().__init__(url, **kwargs)

    def detect(self, image_path: Path, concept: str) -> List[Dict[str, Any]]:
        return self._post({'image': _encode_image(image_path), 'concept': concept})['detections']
