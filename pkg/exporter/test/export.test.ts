import { spawnSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { promises as fs } from "node:fs";
import { tmpdir } from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { ContainerError, readContainer } from "../src/container.js";
import { buildTextGuidance, exportTextGuidance } from "../src/export_text.js";
import { buildImageContainer, exportImageFeatures } from "../src/export_images.js";
import { bytesImageEncoder, hashTextEncoder, plannedSixClassEncoder } from "./fakes.js";

const SIX = ["cat", "dog", "flower", "boat", "bike", "bus"];

function tmp(): string {
  return mkdtempSync(path.join(tmpdir(), "dualcp-exporter-"));
}

function python(): string | null {
  const probe = spawnSync("python3", ["-c", "import dualcp"], { encoding: "utf-8" });
  return probe.status === 0 ? "python3" : null;
}

describe("text guidance export", () => {
  it("emits one unit row per class in order", async () => {
    const container = await buildTextGuidance(SIX, hashTextEncoder(16));
    expect(container.classNames).toEqual(SIX);
    expect(container.labels).toEqual([0, 1, 2, 3, 4, 5]);
    expect(container.domainNames).toEqual(["guidance"]);
    expect(container.normalized).toBe(true);
    for (const row of container.features) {
      const norm = Math.sqrt(row.reduce((acc, v) => acc + v * v, 0));
      expect(Math.abs(norm - 1)).toBeLessThan(1e-9);
    }
  });

  it("rejects duplicate class names", async () => {
    await expect(
      buildTextGuidance(["cat", "cat"], hashTextEncoder()),
    ).rejects.toMatchObject({ code: "BadManifest" });
  });

  it("applies a prompt template", async () => {
    const seen: string[] = [];
    const spy = {
      async encodeText(texts: string[]) {
        seen.push(...texts);
        return hashTextEncoder(8).encodeText(texts);
      },
    };
    await buildTextGuidance(["cat", "dog"], spy, { template: "a photo of a {}" });
    expect(seen).toEqual(["a photo of a cat", "a photo of a dog"]);
  });

  it("rejects a template without a slot", async () => {
    await expect(
      buildTextGuidance(["cat"], hashTextEncoder(), { template: "no slot" }),
    ).rejects.toMatchObject({ code: "BadManifest" });
  });

  it("round-trips through the container file", async () => {
    const dir = tmp();
    const out = path.join(dir, "guidance.dcp");
    await exportTextGuidance(SIX, plannedSixClassEncoder(), out);
    const back = await readContainer(out);
    expect(back.classNames).toEqual(SIX);
    expect(back.normalized).toBe(true);
    // planned cosine structure survives the f32 round trip
    const dot = (a: Float64Array, b: Float64Array) =>
      a.reduce((acc, v, j) => acc + v * b[j], 0);
    expect(dot(back.features[0], back.features[1])).toBeCloseTo(0.9, 5); // cat.dog
    expect(Math.abs(dot(back.features[0], back.features[2]))).toBeLessThan(1e-6); // cat.flower
  });
});

function datasetTree(root: string, domains: string[], classes: string[], perClass = 2) {
  for (const domain of domains) {
    for (const cls of classes) {
      const dir = path.join(root, domain, cls);
      spawnSync("mkdir", ["-p", dir]);
      for (let i = 0; i < perClass; i++) {
        writeFileSync(path.join(dir, `img_${i}.png`), `${domain}/${cls}/${i}`);
      }
    }
  }
}

describe("image feature export", () => {
  it("walks root/<domain>/<class>/<image> deterministically", async () => {
    const root = tmp();
    datasetTree(root, ["photo", "sketch"], ["cat", "dog"], 3);
    const container = await buildImageContainer(root, bytesImageEncoder());
    expect(container.domainNames).toEqual(["photo", "sketch"]);
    expect(container.classNames).toEqual(["cat", "dog"]);
    expect(container.features.length).toBe(2 * 2 * 3);
    expect(container.labels.slice(0, 6)).toEqual([0, 0, 0, 1, 1, 1]);
    expect(container.domainIds.filter((d) => d === 1).length).toBe(6);
  });

  it("honors an explicit domain order", async () => {
    const root = tmp();
    datasetTree(root, ["photo", "sketch"], ["cat", "dog"]);
    const container = await buildImageContainer(root, bytesImageEncoder(), {
      domainOrder: ["sketch", "photo"],
    });
    expect(container.domainNames).toEqual(["sketch", "photo"]);
  });

  it("normalizes rows when asked", async () => {
    const root = tmp();
    datasetTree(root, ["photo"], ["cat", "dog"]);
    const out = path.join(root, "feat.dcp");
    await exportImageFeatures(root, bytesImageEncoder(), out, { normalize: true });
    const back = await readContainer(out);
    expect(back.normalized).toBe(true);
    for (const row of back.features) {
      const norm = Math.sqrt(row.reduce((acc, v) => acc + v * v, 0));
      expect(Math.abs(norm - 1)).toBeLessThan(1e-6);
    }
  });

  it("fails on an empty class directory", async () => {
    const root = tmp();
    datasetTree(root, ["photo"], ["cat", "dog"]);
    await fs.mkdir(path.join(root, "photo", "empty_class"));
    await expect(buildImageContainer(root, bytesImageEncoder())).rejects.toMatchObject({
      code: "MissingClass",
    });
  });

  it("counts decode failures and fails the run", async () => {
    const root = tmp();
    datasetTree(root, ["photo"], ["cat", "dog"]);
    writeFileSync(path.join(root, "photo", "cat", "bad.png"), "CORRUPT bytes");
    const failures: string[] = [];
    await expect(
      buildImageContainer(root, bytesImageEncoder(), {
        onError: (file) => failures.push(file),
      }),
    ).rejects.toMatchObject({ code: "NonFinite" });
    expect(failures.length).toBe(1);
    expect(failures[0]).toContain("bad.png");
  });
});

describe("primary engine interop", () => {
  it("emitted guidance loads and validates in the primary engine", async (ctx) => {
    const py = python();
    if (!py) return ctx.skip(); // primary engine not installed here
    const dir = tmp();
    const out = path.join(dir, "guidance.dcp");
    await exportTextGuidance(SIX, plannedSixClassEncoder(), out);
    const probe = spawnSync(
      py,
      [
        "-c",
        [
          "import sys, dualcp",
          "gm = dualcp.load_guidance(sys.argv[1])",
          "print(gm.num_classes, gm.dim, ','.join(gm.class_names))",
        ].join("\n"),
        out,
      ],
      { encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    expect(probe.stdout.trim()).toBe(`6 8 ${SIX.join(",")}`);
  });

  it("emitted image containers load and validate in the primary engine", async (ctx) => {
    const py = python();
    if (!py) return ctx.skip();
    const root = tmp();
    datasetTree(root, ["photo", "sketch"], ["cat", "dog"], 2);
    const out = path.join(root, "features.dcp");
    await exportImageFeatures(root, bytesImageEncoder(), out, { normalize: true });
    const probe = spawnSync(
      py,
      [
        "-c",
        [
          "import sys, numpy as np, dualcp",
          "es = dualcp.load(sys.argv[1])",
          "norms = np.linalg.norm(es.features.astype(np.float64), axis=1)",
          "print(len(es), es.num_classes, es.num_domains, float(abs(norms - 1).max()) < 1e-6)",
        ].join("\n"),
        out,
      ],
      { encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    expect(probe.stdout.trim()).toBe("8 2 2 True");
  });

  it("six-class guidance groups as planned at threshold 0.85", async (ctx) => {
    const py = python();
    if (!py) return ctx.skip();
    const dir = tmp();
    const guidance = path.join(dir, "guidance.dcp");
    await exportTextGuidance(SIX, plannedSixClassEncoder(), guidance);
    const probe = spawnSync(
      py,
      [
        "-m",
        "dualcp.cli",
        "prototypes",
        "--guidance",
        guidance,
        "--out",
        path.join(dir, "bank"),
        "--p",
        "0.85",
      ],
      { encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);

    // the bank header is length-prefixed JSON after a 4-byte magic
    const raw = await fs.readFile(path.join(dir, "bank", "bank.dcpb"));
    expect(raw.toString("ascii", 0, 4)).toBe("DCB1");
    const headerLen = Number(raw.readBigUInt64LE(4));
    const header = JSON.parse(raw.toString("utf-8", 12, 12 + headerLen));
    expect(header.groups).toEqual([[0, 1], [2], [3, 4, 5]]); // {cat,dog} {flower} {boat,bike,bus}
  });
});

describe("real CLIP encoder", () => {
  it("reproduces the six-class grouping with real text features", async (ctx) => {
    let encoder;
    try {
      const { clipTextEncoder } = await import("../src/encoder.js");
      encoder = await clipTextEncoder();
    } catch {
      return ctx.skip(); // optional dependency or model weights unavailable offline
    }
    const py = python();
    if (!py) return ctx.skip();
    const dir = tmp();
    const guidance = path.join(dir, "guidance.dcp");
    await exportTextGuidance(SIX, encoder, guidance);
    const probe = spawnSync(
      py,
      ["-m", "dualcp.cli", "prototypes", "--guidance", guidance,
       "--out", path.join(dir, "bank"), "--p", "0.85"],
      { encoding: "utf-8" },
    );
    expect(probe.status, probe.stderr).toBe(0);
    const raw = await fs.readFile(path.join(dir, "bank", "bank.dcpb"));
    const headerLen = Number(raw.readBigUInt64LE(4));
    const header = JSON.parse(raw.toString("utf-8", 12, 12 + headerLen));
    expect(header.groups).toEqual([[0, 1], [2], [3, 4, 5]]);
  }, 120_000);
});
