/** DOM wiring for the studio: canvas input, controls, gallery rendering. */

import { ApiClient } from "./api.js";
import { StudioController } from "./studio.js";

const serviceUrl =
    new URLSearchParams(window.location.search).get("service") ?? "http://127.0.0.1:8373";

const studio = new StudioController(new ApiClient(serviceUrl));

const canvas = document.getElementById("sketch") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;
const identitySelect = document.getElementById("identity") as HTMLSelectElement;
const styleSelect = document.getElementById("style") as HTMLSelectElement;
const scaleSlider = document.getElementById("scale") as HTMLInputElement;
const scaleValue = document.getElementById("scale-value") as HTMLSpanElement;
const stepsInput = document.getElementById("steps") as HTMLInputElement;
const cfgInput = document.getElementById("cfg") as HTMLInputElement;
const seedInput = document.getElementById("seed") as HTMLInputElement;
const seedLockInput = document.getElementById("seed-lock") as HTMLInputElement;
const eraserInput = document.getElementById("eraser") as HTMLInputElement;
const brushInput = document.getElementById("brush") as HTMLInputElement;
const generateButton = document.getElementById("generate") as HTMLButtonElement;
const statusLine = document.getElementById("status") as HTMLDivElement;
const galleryList = document.getElementById("gallery") as HTMLDivElement;
const uploadForm = document.getElementById("upload-form") as HTMLFormElement;

function redraw(): void {
    const raster = studio.surface.rasterise();
    const image = ctx.createImageData(studio.surface.width, studio.surface.height);
    for (let i = 0; i < raster.length; i++) {
        image.data[i * 4] = raster[i];
        image.data[i * 4 + 1] = raster[i];
        image.data[i * 4 + 2] = raster[i];
        image.data[i * 4 + 3] = 255;
    }
    ctx.putImageData(image, 0, 0);
}

function canvasPoint(event: PointerEvent): { x: number; y: number } {
    const rect = canvas.getBoundingClientRect();
    return {
        x: ((event.clientX - rect.left) / rect.width) * canvas.width,
        y: ((event.clientY - rect.top) / rect.height) * canvas.height,
    };
}

let drawing = false;
canvas.addEventListener("pointerdown", (event) => {
    drawing = true;
    const { x, y } = canvasPoint(event);
    studio.surface.beginStroke(x, y, Number(brushInput.value), eraserInput.checked);
    redraw();
});
canvas.addEventListener("pointermove", (event) => {
    if (!drawing) return;
    const { x, y } = canvasPoint(event);
    studio.surface.extendStroke(x, y);
    redraw();
});
window.addEventListener("pointerup", () => {
    if (drawing) {
        studio.surface.endStroke();
        drawing = false;
    }
});

document.getElementById("undo")!.addEventListener("click", () => {
    studio.surface.undo();
    redraw();
});
document.getElementById("clear")!.addEventListener("click", () => {
    studio.surface.clear();
    redraw();
});

function syncControlsFromState(): void {
    scaleSlider.value = String(studio.scale);
    scaleValue.textContent = studio.scale.toFixed(2);
    stepsInput.value = String(studio.steps);
    cfgInput.value = String(studio.cfg);
    seedInput.value = String(studio.seed);
    identitySelect.value = studio.identityId ?? "";
    styleSelect.value = studio.styleId ?? "";
    generateButton.disabled = !studio.canGenerate();
}

function renderConcepts(): void {
    const fill = (select: HTMLSelectElement, kind: "identity" | "style", optional: boolean) => {
        const current = select.value;
        select.innerHTML = optional ? '<option value="">none</option>' : "";
        for (const concept of studio.concepts.filter((c) => c.kind === kind)) {
            const option = document.createElement("option");
            option.value = concept.id;
            option.textContent = `${concept.superclass} (${concept.id})`;
            select.appendChild(option);
        }
        select.value = current;
    };
    fill(identitySelect, "identity", false);
    fill(styleSelect, "style", true);
    if (!studio.identityId && studio.identityConcepts().length > 0) {
        studio.identityId = studio.identityConcepts()[0].id;
    }
    syncControlsFromState();
}

function renderGallery(): void {
    galleryList.innerHTML = "";
    for (const entry of [...studio.gallery].reverse()) {
        const card = document.createElement("div");
        card.className = "card";
        const img = document.createElement("img");
        img.src = entry.resultUrl;
        img.width = 128;
        const caption = document.createElement("div");
        caption.textContent = `s=${entry.scale.toFixed(2)} seed=${entry.seed} steps=${entry.steps}`;
        const restore = document.createElement("button");
        restore.textContent = "restore";
        restore.addEventListener("click", () => {
            studio.restore(entry);
            syncControlsFromState();
            redraw();
        });
        card.append(img, caption, restore);
        galleryList.appendChild(card);
    }
}

identitySelect.addEventListener("change", () => {
    studio.identityId = identitySelect.value || null;
    syncControlsFromState();
});
styleSelect.addEventListener("change", () => {
    studio.styleId = styleSelect.value || null;
});
scaleSlider.addEventListener("input", () => {
    studio.scale = Number(scaleSlider.value);
    scaleValue.textContent = studio.scale.toFixed(2);
});
stepsInput.addEventListener("change", () => (studio.steps = Number(stepsInput.value)));
cfgInput.addEventListener("change", () => (studio.cfg = Number(cfgInput.value)));
seedInput.addEventListener("change", () => (studio.seed = Number(seedInput.value)));
seedLockInput.addEventListener("change", () => (studio.seedLock = seedLockInput.checked));

generateButton.addEventListener("click", async () => {
    statusLine.textContent = "generating...";
    generateButton.disabled = true;
    const entry = await studio.generate();
    if (entry === null) {
        statusLine.textContent = studio.needsResize
            ? `${studio.lastError} - clear the canvas to resize it to the service resolution`
            : `error: ${studio.lastError} (retry when ready)`;
    } else {
        statusLine.textContent = "done";
        renderGallery();
        syncControlsFromState();
    }
    generateButton.disabled = !studio.canGenerate();
});

uploadForm.addEventListener("submit", async (event) => {
    event.preventDefault();
    const form = new FormData(uploadForm);
    try {
        await studio.api.uploadConcept(form);
        statusLine.textContent = "concept training submitted";
    } catch (err) {
        statusLine.textContent = `upload failed: ${err}`;
    }
});

async function start(): Promise<void> {
    await studio.init();
    canvas.width = studio.resolution;
    canvas.height = studio.resolution;
    scaleSlider.max = String(studio.scaleMax);
    seedLockInput.checked = studio.seedLock;
    renderConcepts();
    redraw();
    // poll-driven refresh so finished finetune jobs appear without a reload
    setInterval(async () => {
        const before = studio.concepts.map((c) => c.id).join(",");
        await studio.refreshConcepts();
        if (studio.concepts.map((c) => c.id).join(",") !== before) {
            renderConcepts();
        }
    }, 2000);
}

start().catch((err) => {
    statusLine.textContent = `cannot reach service at ${serviceUrl}: ${err}`;
});
