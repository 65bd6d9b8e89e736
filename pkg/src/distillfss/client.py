"""Thin HTTP client for the pipeline service; the CLI is built on this."""

from __future__ import annotations

import base64
from pathlib import Path
from typing import Optional

import httpx

DEFAULT_SERVER = "http://127.0.0.1:8421"


class ServiceError(Exception):
    def __init__(self, status_code: int, detail):
        self.status_code = status_code
        self.detail = detail
        super().__init__(f"service returned {status_code}: {format_detail(detail)}")


def format_detail(detail) -> str:
    if isinstance(detail, list):  # pydantic validation errors
        parts = []
        for item in detail:
            loc = ".".join(str(p) for p in item.get("loc", []) if p != "body")
            parts.append(f"{loc}: {item.get('msg', '')}")
        return "; ".join(parts)
    return str(detail)


class ServiceClient:
    """One method per endpoint; raises ServiceError on any non-2xx reply."""

    def __init__(
        self,
        base_url: str = DEFAULT_SERVER,
        timeout: Optional[float] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, method: str, path: str, payload: Optional[dict] = None) -> dict:
        try:
            response = self._client.request(method, path, json=payload)
        except httpx.HTTPError as exc:
            raise ServiceError(0, f"cannot reach service: {exc}") from None
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail", response.text)
            except ValueError:
                detail = response.text
            raise ServiceError(response.status_code, detail)
        return response.json()

    def health(self) -> dict:
        return self._request("GET", "/health")

    def synth(self, **payload) -> dict:
        return self._request("POST", "/datasets/synth", payload)

    def train_base(self, **payload) -> dict:
        return self._request("POST", "/train/base", payload)

    def transfer(self, **payload) -> dict:
        return self._request("POST", "/train/transfer", payload)

    def distill(self, **payload) -> dict:
        return self._request("POST", "/train/distill", payload)

    def evaluate(self, **payload) -> dict:
        return self._request("POST", "/eval", payload)

    def bench(self, **payload) -> dict:
        return self._request("POST", "/bench", payload)

    def segment(self, checkpoint: str, image_path: str | Path) -> dict:
        encoded = base64.b64encode(Path(image_path).read_bytes()).decode()
        return self._request(
            "POST",
            "/segment",
            {"checkpoint": str(checkpoint), "image_png_base64": encoded},
        )
