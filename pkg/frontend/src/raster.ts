/**
 * Pure stroke model and rasteriser for the sketch canvas.
 *
 * Strokes are kept as geometry so undo is exact: the raster is always
 * recomputed from the remaining stroke list. Pixels are 0 (background) or
 * 255 (stroke); eraser strokes stamp background over earlier strokes.
 */

export interface StrokePoint {
    x: number;
    y: number;
}

export interface Stroke {
    points: StrokePoint[];
    radius: number;
    erase: boolean;
}

export function cloneStrokes(strokes: readonly Stroke[]): Stroke[] {
    return strokes.map((s) => ({
        points: s.points.map((p) => ({ x: p.x, y: p.y })),
        radius: s.radius,
        erase: s.erase,
    }));
}

export class SketchSurface {
    readonly width: number;
    readonly height: number;
    private strokes: Stroke[] = [];
    private current: Stroke | null = null;

    constructor(width: number, height: number) {
        if (width < 1 || height < 1) {
            throw new Error(`invalid surface size ${width}x${height}`);
        }
        this.width = width;
        this.height = height;
    }

    beginStroke(x: number, y: number, radius = 1.5, erase = false): void {
        this.current = { points: [{ x, y }], radius, erase };
        this.strokes.push(this.current);
    }

    extendStroke(x: number, y: number): void {
        if (!this.current) {
            throw new Error("no active stroke");
        }
        this.current.points.push({ x, y });
    }

    endStroke(): void {
        this.current = null;
    }

    undo(): void {
        this.endStroke();
        this.strokes.pop();
    }

    clear(): void {
        this.endStroke();
        this.strokes = [];
    }

    get strokeCount(): number {
        return this.strokes.length;
    }

    getStrokes(): Stroke[] {
        return cloneStrokes(this.strokes);
    }

    setStrokes(strokes: readonly Stroke[]): void {
        this.endStroke();
        this.strokes = cloneStrokes(strokes);
    }

    /** Grayscale raster, one byte per pixel, row-major. */
    rasterise(): Uint8Array {
        const pixels = new Uint8Array(this.width * this.height);
        for (const stroke of this.strokes) {
            const value = stroke.erase ? 0 : 255;
            const pts = stroke.points;
            for (let i = 0; i < pts.length; i++) {
                const a = pts[i];
                const b = pts[Math.min(i + 1, pts.length - 1)];
                this.stampSegment(pixels, a, b, stroke.radius, value);
            }
        }
        return pixels;
    }

    private stampSegment(
        pixels: Uint8Array,
        a: StrokePoint,
        b: StrokePoint,
        radius: number,
        value: number,
    ): void {
        const length = Math.hypot(b.x - a.x, b.y - a.y);
        const steps = Math.max(1, Math.ceil(length * 2));
        for (let s = 0; s <= steps; s++) {
            const t = s / steps;
            this.stampDisc(pixels, a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, radius, value);
        }
    }

    private stampDisc(
        pixels: Uint8Array,
        cx: number,
        cy: number,
        radius: number,
        value: number,
    ): void {
        const r2 = radius * radius;
        const x0 = Math.max(0, Math.floor(cx - radius));
        const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
        const y0 = Math.max(0, Math.floor(cy - radius));
        const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
        for (let y = y0; y <= y1; y++) {
            for (let x = x0; x <= x1; x++) {
                const dx = x + 0.5 - cx;
                const dy = y + 0.5 - cy;
                if (dx * dx + dy * dy <= r2) {
                    pixels[y * this.width + x] = value;
                }
            }
        }
    }
}
