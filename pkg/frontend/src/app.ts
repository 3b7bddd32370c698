// Browser client for the blind rating study. Presents one anonymous image
// at a time with score buttons 1-10 (keyboard: 1-9 and 0 for 10). The DOM
// never contains the image's identity: only opaque tokens and counters.

import { ApiError, StudyApi } from "./api.js";
import { SessionView, isValidScore, keyToScore, viewFromNext } from "./session.js";

const STORAGE_KEY = "ldct-study-session";

export interface AppConfig {
  root: HTMLElement;
  api: StudyApi;
  storage: Storage;
  doc: Document;
}

export class App {
  private readonly root: HTMLElement;
  private readonly api: StudyApi;
  private readonly storage: Storage;
  private readonly doc: Document;
  private view: SessionView | null = null;
  private selected: number | null = null;
  private busy = false;

  constructor(config: AppConfig) {
    this.root = config.root;
    this.api = config.api;
    this.storage = config.storage;
    this.doc = config.doc;
    this.doc.addEventListener("keydown", (e) => this.onKey(e as KeyboardEvent));
  }

  async init(): Promise<void> {
    const stored = this.storage.getItem(STORAGE_KEY);
    if (stored) {
      await this.loadNext(stored); // server holds the cursor; reload resumes
    } else {
      this.renderStart();
    }
  }

  // ------------------------------------------------------------------ start

  private renderStart(message = ""): void {
    this.root.innerHTML = `
      <div class="panel start-panel">
        <h1>Image rating session</h1>
        <label>Rater id <input id="rater" type="text" autocomplete="off"></label>
        <label>Session seed <input id="seed" type="number" value="1"></label>
        <button id="begin">Begin</button>
        <p class="message" id="start-message">${message}</p>
      </div>`;
    this.byId<HTMLButtonElement>("begin").addEventListener("click", () => {
      void this.startSession();
    });
  }

  private async startSession(): Promise<void> {
    const rater = this.byId<HTMLInputElement>("rater").value.trim();
    const seed = Number(this.byId<HTMLInputElement>("seed").value);
    if (!rater) {
      this.byId("start-message").textContent = "Enter a rater id to begin.";
      return;
    }
    if (!Number.isInteger(seed)) {
      this.byId("start-message").textContent = "Seed must be an integer.";
      return;
    }
    try {
      const created = await this.api.createSession(rater, seed);
      this.storage.setItem(STORAGE_KEY, created.session_id);
      await this.loadNext(created.session_id);
    } catch (err) {
      this.renderStart(this.describe(err));
    }
  }

  // ------------------------------------------------------------------- item

  private async loadNext(sessionId: string): Promise<void> {
    try {
      const resp = await this.api.nextItem(sessionId);
      this.view = viewFromNext(sessionId, resp);
      this.selected = null;
      if (this.view.finished) {
        this.renderDone();
      } else {
        this.renderItem();
      }
    } catch (err) {
      this.renderRetry(this.describe(err), () => this.loadNext(sessionId));
    }
  }

  private renderItem(): void {
    const view = this.view as SessionView;
    const percent = view.total ? Math.round((100 * view.done) / view.total) : 0;
    const buttons = Array.from({ length: 10 }, (_, i) => i + 1)
      .map((n) => `<button class="score" data-score="${n}">${n}</button>`)
      .join("");
    this.root.innerHTML = `
      <div class="panel rate-panel">
        <div class="progress-line">
          <span id="progress-text">${view.done} / ${view.total}</span>
          <div class="progress-bar"><div class="progress-fill" style="width:${percent}%"></div></div>
        </div>
        <img id="slice" alt="study image" draggable="false">
        <p class="hint">Rate this image for diagnostic suitability:
          1 (worst) to 10 (best). Keys 1-9 select, 0 selects 10.</p>
        <div class="scores" id="scores">${buttons}</div>
        <button id="submit" disabled>Submit score</button>
        <p class="message" id="item-message"></p>
      </div>`;
    const img = this.byId<HTMLImageElement>("slice");
    img.addEventListener("error", () => {
      this.renderRetry(`image failed to decode (item ${view.token})`,
        () => this.loadNext(view.sessionId));
    });
    img.src = view.imageDataUrl as string;
    this.root.querySelectorAll<HTMLButtonElement>("button.score").forEach((button) => {
      button.addEventListener("click", () => {
        this.select(Number(button.dataset.score));
      });
    });
    this.byId<HTMLButtonElement>("submit").addEventListener("click", () => {
      void this.submit();
    });
  }

  private select(score: number): void {
    if (!this.view || this.view.finished || !isValidScore(score)) {
      return;
    }
    this.selected = score;
    this.root.querySelectorAll<HTMLButtonElement>("button.score").forEach((button) => {
      button.classList.toggle("selected", Number(button.dataset.score) === score);
    });
    const submit = this.root.querySelector<HTMLButtonElement>("#submit");
    if (submit) {
      submit.disabled = false;
    }
  }

  private onKey(event: KeyboardEvent): void {
    if (!this.view || this.view.finished) {
      return;
    }
    const score = keyToScore(event.key);
    if (score !== null) {
      this.select(score);
    } else if (event.key === "Enter" && this.selected !== null) {
      void this.submit();
    }
  }

  private async submit(): Promise<void> {
    const view = this.view;
    if (!view || view.token === null || this.selected === null || this.busy) {
      return;
    }
    this.busy = true;
    try {
      await this.api.submitScore(view.sessionId, view.token, this.selected);
      await this.loadNext(view.sessionId); // advance only on acknowledged submit
    } catch (err) {
      if (err instanceof ApiError && err.status === 400) {
        // stale token: the server cursor moved; reload the current item
        await this.loadNext(view.sessionId);
      } else {
        this.renderRetry(this.describe(err), () => this.submit());
      }
    } finally {
      this.busy = false;
    }
  }

  // ------------------------------------------------------------- end states

  private renderDone(): void {
    this.root.innerHTML = `
      <div class="panel done-panel">
        <h1>Session complete</h1>
        <p>Every image has been scored. Thank you. The aggregate report is
           produced separately by the study coordinator.</p>
        <button id="new-session">Start another session</button>
      </div>`;
    this.byId<HTMLButtonElement>("new-session").addEventListener("click", () => {
      this.storage.removeItem(STORAGE_KEY);
      this.view = null;
      this.renderStart();
    });
  }

  private renderRetry(message: string, retry: () => Promise<void> | void): void {
    this.root.innerHTML = `
      <div class="panel retry-panel">
        <p class="message">${message}</p>
        <button id="retry">Retry</button>
      </div>`;
    this.byId<HTMLButtonElement>("retry").addEventListener("click", () => {
      void retry();
    });
  }

  private describe(err: unknown): string {
    if (err instanceof ApiError) {
      return err.status === 0 ? "Cannot reach the study service." : err.message;
    }
    return String(err);
  }

  private byId<T extends HTMLElement = HTMLElement>(id: string): T {
    const el = this.root.querySelector<T>(`#${id}`);
    if (!el) {
      throw new Error(`missing element #${id}`);
    }
    return el;
  }
}

export function mount(): void {
  const doc = document;
  const root = doc.getElementById("app");
  if (root) {
    const app = new App({ root, api: new StudyApi(""), storage: localStorage, doc });
    void app.init();
  }
}

if (typeof window !== "undefined" && typeof document !== "undefined"
    && document.getElementById("app")) {
  mount();
}
