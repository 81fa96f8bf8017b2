"""OCI distribution HTTP client: pull and push by digest.

Speaks /v2/ with anonymous bearer-token challenge handling. Every blob is
verified against its descriptor digest while streaming and only becomes
visible in the cache after the hash matches; a corrupted transfer never
lands. Proxies and custom CA bundles come from the conventional environment
variables via requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
from dataclasses import dataclass

import requests

from .image import MT_CONFIG, MT_LAYER_GZIP, MT_MANIFEST, digest_of

log = logging.getLogger(__name__)

MT_DOCKER_MANIFEST = "application/vnd.docker.distribution.manifest.v2+json"
MT_OCI_INDEX = "application/vnd.oci.image.index.v1+json"
MT_DOCKER_LIST = "application/vnd.docker.distribution.manifest.list.v2+json"

_ACCEPT = ", ".join((MT_MANIFEST, MT_DOCKER_MANIFEST, MT_OCI_INDEX,
                     MT_DOCKER_LIST))
_DIGEST_RE = re.compile(r"^sha256:[0-9a-f]{64}$")
_CHUNK = 1 << 16


class RegistryError(Exception):
    pass


class AuthFailedError(RegistryError):
    pass


class NotFoundError(RegistryError):
    pass


class UnsupportedMediaTypeError(RegistryError):
    pass


class DigestMismatchError(RegistryError):
    pass


class UploadRejectedError(RegistryError):
    def __init__(self, status, body):
        super().__init__("upload rejected: HTTP %d: %s" % (status, body[:200]))
        self.status = status


@dataclass(frozen=True)
class Descriptor:
    media_type: str
    digest: str
    size: int

    def __post_init__(self):
        if not _DIGEST_RE.match(self.digest):
            raise RegistryError("bad digest: %r" % self.digest)
        if self.size < 0:
            raise RegistryError("negative size for %s" % self.digest)


@dataclass(frozen=True)
class Manifest:
    media_type: str
    config: Descriptor
    layers: tuple[Descriptor, ...]
    raw: bytes

    @property
    def digest(self):
        return digest_of(self.raw)


def parse_manifest(raw, media_type):
    doc = json.loads(raw)
    media_type = doc.get("mediaType", media_type)
    if media_type not in (MT_MANIFEST, MT_DOCKER_MANIFEST):
        raise UnsupportedMediaTypeError("not an image manifest: %r" % media_type)
    try:
        config = Descriptor(doc["config"].get("mediaType", MT_CONFIG),
                            doc["config"]["digest"],
                            doc["config"]["size"])
        layers = tuple(Descriptor(d.get("mediaType", MT_LAYER_GZIP),
                                  d["digest"], d["size"])
                       for d in doc["layers"])
    except (KeyError, TypeError) as exc:
        raise RegistryError("malformed manifest: %s" % exc) from exc
    return Manifest(media_type, config, layers, raw)


def _platform_arch():
    machine = os.uname().machine
    return {"x86_64": "amd64", "aarch64": "arm64"}.get(machine, machine)


class RegistryClient:
    """Client bound to one store's blob cache.

    Plain HTTP is used for localhost registries (the test fixture);
    everything else goes over HTTPS.
    """

    def __init__(self, store, session=None):
        self.store = store
        self.http = session or requests.Session()
        self._tokens = {}  # host -> bearer token

    def _base(self, host):
        bare = host.split(":")[0]
        scheme = "http" if bare in ("localhost", "127.0.0.1") else "https"
        return "%s://%s" % (scheme, host)

    def _request(self, method, url, host, *, headers=None, stream=False,
                 data=None, retry_auth=True):
        headers = dict(headers or {})
        token = self._tokens.get(host)
        if token:
            headers["Authorization"] = "Bearer " + token
        resp = self.http.request(method, url, headers=headers, stream=stream,
                                 data=data, allow_redirects=True)
        if resp.status_code == 401:
            if not retry_auth:
                raise AuthFailedError("authentication failed for %s" % url)
            self._authenticate(host, resp)
            return self._request(method, url, host, headers=headers,
                                 stream=stream, data=data, retry_auth=False)
        return resp

    def _authenticate(self, host, resp):
        challenge = resp.headers.get("WWW-Authenticate", "")
        if not challenge.startswith("Bearer "):
            raise AuthFailedError("unsupported challenge: %r" % challenge)
        params = dict(re.findall(r'(\w+)="([^"]*)"', challenge))
        realm = params.get("realm")
        if not realm:
            raise AuthFailedError("challenge without realm: %r" % challenge)
        query = {k: v for k, v in params.items() if k in ("service", "scope")}
        token_resp = self.http.get(realm, params=query)
        if token_resp.status_code != 200:
            raise AuthFailedError("token endpoint returned %d"
                                  % token_resp.status_code)
        token = token_resp.json().get("token")
        if not token:
            raise AuthFailedError("token endpoint returned no token")
        self._tokens[host] = token

    # -- pull ----------------------------------------------------------

    def pull(self, ref):
        """Fetch manifest and blobs for ref; blobs land verified in dl/.

        Accepts current and legacy manifest media types and resolves one
        level of manifest list by platform. Returns the Manifest.
        """
        manifest = self._fetch_manifest(ref, ref.tag)
        for desc in (manifest.config,) + manifest.layers:
            self._fetch_blob(ref, desc)
        return manifest

    def _fetch_manifest(self, ref, tag_or_digest, nested=False):
        host = ref.host
        url = "%s/v2/%s/manifests/%s" % (self._base(host), ref.repository,
                                         tag_or_digest)
        resp = self._request("GET", url, host, headers={"Accept": _ACCEPT})
        if resp.status_code == 404:
            raise NotFoundError("manifest not found: %s" % url)
        if resp.status_code != 200:
            raise RegistryError("manifest fetch failed: HTTP %d"
                                % resp.status_code)
        media_type = resp.headers.get("Content-Type", "")
        raw = resp.content
        if media_type in (MT_OCI_INDEX, MT_DOCKER_LIST):
            if nested:
                raise UnsupportedMediaTypeError("nested manifest lists")
            doc = json.loads(raw)
            arch = _platform_arch()
            for entry in doc.get("manifests", []):
                platform = entry.get("platform", {})
                if (platform.get("os", "linux") == "linux"
                        and platform.get("architecture") == arch):
                    return self._fetch_manifest(ref, entry["digest"],
                                                nested=True)
            raise NotFoundError("manifest list has no linux/%s entry" % arch)
        return parse_manifest(raw, media_type)

    def _fetch_blob(self, ref, desc):
        cached = self.store.blob_path(desc.digest)
        if os.path.exists(cached):
            return cached
        host = ref.host
        url = "%s/v2/%s/blobs/%s" % (self._base(host), ref.repository,
                                     desc.digest)
        resp = self._request("GET", url, host, stream=True)
        if resp.status_code == 404:
            raise NotFoundError("blob not found: %s" % desc.digest)
        if resp.status_code != 200:
            raise RegistryError("blob fetch failed: HTTP %d" % resp.status_code)
        hasher = hashlib.sha256()
        tmp = cached + ".tmp.%d.%d" % (os.getpid(), time.monotonic_ns())
        try:
            with open(tmp, "wb") as out:
                for chunk in resp.iter_content(_CHUNK):
                    hasher.update(chunk)
                    out.write(chunk)
            got = "sha256:" + hasher.hexdigest()
            if got != desc.digest:
                raise DigestMismatchError(
                    "blob %s arrived as %s; discarded" % (desc.digest, got))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        os.replace(tmp, cached)  # atomic: concurrent pulls race benignly
        return cached

    # -- push ----------------------------------------------------------

    def push(self, ref, manifest_bytes, blobs):
        """Upload blobs then the manifest; returns the manifest digest.

        blobs maps digest -> bytes. Blob uploads are skipped when a HEAD
        shows the registry already has the digest.
        """
        host = ref.host
        base = self._base(host)
        for digest, data in blobs.items():
            head_url = "%s/v2/%s/blobs/%s" % (base, ref.repository, digest)
            head = self._request("HEAD", head_url, host)
            if head.status_code == 200:
                continue
            init_url = "%s/v2/%s/blobs/uploads/" % (base, ref.repository)
            init = self._request("POST", init_url, host)
            if init.status_code not in (202,):
                raise UploadRejectedError(init.status_code, init.text)
            location = init.headers.get("Location", "")
            if location.startswith("/"):
                location = base + location
            sep = "&" if "?" in location else "?"
            put = self._request("PUT", location + sep + "digest=" + digest,
                                host, data=data,
                                headers={"Content-Type":
                                         "application/octet-stream"})
            if put.status_code not in (201, 204):
                raise UploadRejectedError(put.status_code, put.text)
        manifest_url = "%s/v2/%s/manifests/%s" % (base, ref.repository, ref.tag)
        resp = self._request("PUT", manifest_url, host, data=manifest_bytes,
                             headers={"Content-Type": MT_MANIFEST})
        if resp.status_code not in (201, 202):
            raise UploadRejectedError(resp.status_code, resp.text)
        return digest_of(manifest_bytes)
