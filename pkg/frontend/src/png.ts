/**
 * Minimal 8-bit grayscale PNG encoder.
 *
 * The browser canvas API cannot export single-channel PNGs, and the service's
 * sketch contract is exactly that, so the studio writes its own: stored
 * (uncompressed) deflate blocks inside a zlib stream, filter 0 scanlines.
 * Output is deterministic byte-for-byte for a given raster.
 */

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
    const table = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
        let c = n;
        for (let k = 0; k < 8; k++) {
            c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
        }
        table[n] = c >>> 0;
    }
    return table;
})();

function crc32(bytes: Uint8Array): number {
    let c = 0xffffffff;
    for (let i = 0; i < bytes.length; i++) {
        c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
    }
    return (c ^ 0xffffffff) >>> 0;
}

function adler32(bytes: Uint8Array): number {
    let a = 1;
    let b = 0;
    for (let i = 0; i < bytes.length; i++) {
        a = (a + bytes[i]) % 65521;
        b = (b + a) % 65521;
    }
    return ((b << 16) | a) >>> 0;
}

function u32(value: number): number[] {
    return [(value >>> 24) & 0xff, (value >>> 16) & 0xff, (value >>> 8) & 0xff, value & 0xff];
}

function chunk(type: string, data: Uint8Array): Uint8Array {
    const typeBytes = [...type].map((ch) => ch.charCodeAt(0));
    const body = new Uint8Array(typeBytes.length + data.length);
    body.set(typeBytes);
    body.set(data, typeBytes.length);
    return new Uint8Array([...u32(data.length), ...body, ...u32(crc32(body))]);
}

/** Raw scanlines (filter byte 0 per row) wrapped in a stored-block zlib stream. */
function zlibStored(raw: Uint8Array): Uint8Array {
    const pieces: number[] = [0x78, 0x01];
    const max = 65535;
    for (let offset = 0; offset < raw.length || offset === 0; offset += max) {
        const block = raw.subarray(offset, Math.min(offset + max, raw.length));
        const final = offset + max >= raw.length ? 1 : 0;
        pieces.push(final, block.length & 0xff, (block.length >>> 8) & 0xff);
        pieces.push(~block.length & 0xff, (~block.length >>> 8) & 0xff);
        for (let i = 0; i < block.length; i++) {
            pieces.push(block[i]);
        }
        if (raw.length === 0) {
            break;
        }
    }
    pieces.push(...u32(adler32(raw)));
    return new Uint8Array(pieces);
}

export function encodeGrayPng(width: number, height: number, gray: Uint8Array): Uint8Array {
    if (gray.length !== width * height) {
        throw new Error(`raster has ${gray.length} bytes, expected ${width * height}`);
    }
    const ihdr = new Uint8Array([...u32(width), ...u32(height), 8, 0, 0, 0, 0]);
    const raw = new Uint8Array((width + 1) * height);
    for (let y = 0; y < height; y++) {
        raw[y * (width + 1)] = 0; // filter: none
        raw.set(gray.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
    }
    const parts = [
        new Uint8Array(SIGNATURE),
        chunk("IHDR", ihdr),
        chunk("IDAT", zlibStored(raw)),
        chunk("IEND", new Uint8Array(0)),
    ];
    const total = parts.reduce((n, p) => n + p.length, 0);
    const out = new Uint8Array(total);
    let cursor = 0;
    for (const part of parts) {
        out.set(part, cursor);
        cursor += part.length;
    }
    return out;
}

const B64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

export function bytesToBase64(bytes: Uint8Array): string {
    let out = "";
    for (let i = 0; i < bytes.length; i += 3) {
        const a = bytes[i];
        const b = i + 1 < bytes.length ? bytes[i + 1] : 0;
        const c = i + 2 < bytes.length ? bytes[i + 2] : 0;
        out += B64[a >> 2] + B64[((a & 3) << 4) | (b >> 4)];
        out += i + 1 < bytes.length ? B64[((b & 15) << 2) | (c >> 6)] : "=";
        out += i + 2 < bytes.length ? B64[c & 63] : "=";
    }
    return out;
}
