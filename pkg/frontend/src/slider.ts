/**
 * Draggable split view: the after image is clipped at the handle so the two
 * renders share one frame. Both <img> elements show the server's PNG bytes
 * untouched; only CSS clipping moves.
 */
export function mountCompareSlider(root: HTMLElement, beforeUrl: string, afterUrl: string): void {
  root.classList.add("compare");
  const before = document.createElement("img");
  before.src = beforeUrl;
  before.alt = "before";
  before.draggable = false;
  const after = document.createElement("img");
  after.src = afterUrl;
  after.alt = "after";
  after.className = "compare-after";
  after.draggable = false;
  const handle = document.createElement("div");
  handle.className = "compare-handle";
  const labels = document.createElement("div");
  labels.className = "compare-labels";
  labels.innerHTML = "<span>before</span><span>after</span>";
  root.append(before, after, handle, labels);

  const setPosition = (percent: number) => {
    const clamped = Math.max(0, Math.min(100, percent));
    after.style.clipPath = `inset(0 0 0 ${clamped}%)`;
    handle.style.left = `${clamped}%`;
  };
  setPosition(50);

  let dragging = false;
  const follow = (event: PointerEvent) => {
    if (!dragging) return;
    const rect = root.getBoundingClientRect();
    setPosition(((event.clientX - rect.left) / rect.width) * 100);
  };
  root.addEventListener("pointerdown", (event) => {
    dragging = true;
    root.setPointerCapture(event.pointerId);
    follow(event);
  });
  root.addEventListener("pointermove", follow);
  root.addEventListener("pointerup", (event) => {
    dragging = false;
    root.releasePointerCapture(event.pointerId);
  });
}
